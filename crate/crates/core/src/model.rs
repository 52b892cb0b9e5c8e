//! The conditional scoring head: prompt banks, learnable rating tokens, the
//! two conditional tuners, the forward pass, and its hand-written backward
//! pass.
//!
//! Scoring works in a frozen joint embedding space. A drawing's image
//! embedding is nudged by two residual offsets (one predicted from its
//! content distribution, one from its ink intensity), re-normalized, and
//! compared against five level embeddings. The softmax over those
//! similarities is read out as an expected score in [0.2, 1.0].
//!
//! Everything trainable lives in [`CscaParameters`]; the backward pass is
//! written out manually so gradient checks exercise the exact arithmetic
//! used in production.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{l2_normalize, EncoderBundle, FeatureVector, TokenEmbeddings, NORM_FLOOR};
use crate::error::{CscaError, Result};
use crate::imaging::{decode_and_invert, ink_intensity, preprocess, ChannelStats};
use crate::types::{ContentLabel, CreativityLevel, RunConfig};
use crate::util::splitmix64;

/// Numerically stable softmax. The output always sums to 1 up to rounding
/// and every entry is non-negative.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|v| (v - max).exp());
    let sum: f64 = exps.iter().sum();
    exps / sum
}

/// Expected score of a five-level probability vector.
///
/// The level weights are 0.2, 0.4, 0.6, 0.8, 1.0. The sum is computed as
/// `(sum_s p_s * (s+1)) / 5` rather than a dot product with the weight
/// array: the integer-valued partial sums keep the uniform distribution at
/// exactly 0.6 and every one-hot distribution at exactly its weight, with
/// no rounding residue.
pub fn expected_score(probs: &Array1<f64>) -> f64 {
    let mut acc = 0.0f64;
    for (i, &p) in probs.iter().enumerate() {
        acc += p * (i as f64 + 1.0);
    }
    acc / 5.0
}

/// A probability vector over the five creativity levels plus its expected
/// score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    pub probs: Array1<f64>,
    pub score: f64,
}

impl ScoreDistribution {
    /// Builds from explicit probabilities, validating the simplex
    /// constraint to 1e-6.
    pub fn from_probs(probs: Array1<f64>) -> Result<Self> {
        if probs.len() != 5 {
            return Err(CscaError::DimensionMismatch(format!(
                "score distribution needs 5 probabilities, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(CscaError::NonFinite("score probabilities".into()));
        }
        if probs.iter().any(|&p| !(-1e-9..=1.0 + 1e-6).contains(&p)) {
            return Err(CscaError::Config(format!(
                "score probabilities out of [0, 1]: {probs}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CscaError::Config(format!(
                "score probabilities sum to {sum}, expected 1"
            )));
        }
        let score = expected_score(&probs);
        Ok(ScoreDistribution { probs, score })
    }

    /// Builds by softmaxing raw similarity logits.
    pub fn from_logits(logits: &Array1<f64>) -> Result<Self> {
        if logits.len() != 5 {
            return Err(CscaError::DimensionMismatch(format!(
                "score head needs 5 logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CscaError::NonFinite("score logits".into()));
        }
        let probs = softmax(logits);
        let score = expected_score(&probs);
        Ok(ScoreDistribution { probs, score })
    }
}

/// Frozen text embeddings of the five content prompts `a photo of {c}`.
#[derive(Debug, Clone)]
pub struct ContentPromptBank {
    /// One unit vector per [`ContentLabel`], in code order.
    pub embeddings: Vec<FeatureVector>,
}

impl ContentPromptBank {
    pub fn build(bundle: &dyn EncoderBundle) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(5);
        for label in ContentLabel::ALL {
            let ids = bundle.tokenize(&label.prompt());
            let tokens = bundle.token_embeddings(&ids);
            embeddings.push(bundle.text_encode(&tokens)?);
        }
        Ok(ContentPromptBank { embeddings })
    }
}

/// Frozen text embeddings of the five full level templates, used when the
/// learnable rating tokens are disabled.
#[derive(Debug, Clone)]
pub struct TemplateLevelBank {
    /// One unit vector per [`CreativityLevel`], in code order.
    pub embeddings: Vec<FeatureVector>,
}

impl TemplateLevelBank {
    pub fn build(bundle: &dyn EncoderBundle) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(5);
        for level in CreativityLevel::ALL {
            let ids = bundle.tokenize(&level.template());
            let tokens = bundle.token_embeddings(&ids);
            embeddings.push(bundle.text_encode(&tokens)?);
        }
        Ok(TemplateLevelBank { embeddings })
    }
}

/// Learnable token sequences, one per creativity level.
///
/// Rows start as the frozen embeddings of the tokenized level template and
/// are free parameters from then on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTokenBank {
    /// One `(n_tokens, token_dim)` block per level, in code order.
    pub tokens: Vec<TokenEmbeddings>,
}

impl RatingTokenBank {
    /// Initializes from the level templates. `tokens_per_level == 0` keeps
    /// each template's natural token count; a positive value truncates or
    /// cyclically repeats template tokens to hit that count exactly.
    pub fn init(bundle: &dyn EncoderBundle, tokens_per_level: usize) -> Result<Self> {
        let mut banks = Vec::with_capacity(5);
        for level in CreativityLevel::ALL {
            let mut ids = bundle.tokenize(&level.template());
            if ids.is_empty() {
                return Err(CscaError::Backbone(format!(
                    "tokenizer produced no tokens for level template `{}`",
                    level.template()
                )));
            }
            if tokens_per_level > 0 {
                if ids.len() > tokens_per_level {
                    ids.truncate(tokens_per_level);
                } else {
                    let base = ids.clone();
                    let mut i = 0;
                    while ids.len() < tokens_per_level {
                        ids.push(base[i % base.len()]);
                        i += 1;
                    }
                }
            }
            banks.push(bundle.token_embeddings(&ids));
        }
        Ok(RatingTokenBank { tokens: banks })
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.ncols())
    }

    fn param_count(&self) -> usize {
        self.tokens.iter().map(|t| t.len()).sum()
    }
}

/// Two-layer perceptron used by both conditional tuners.
///
/// The output layer starts at zero so a freshly initialized tuner
/// contributes nothing to the modulated embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `(hidden, input)` weight.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `(output, hidden)` weight, zero at init.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    /// Gaussian first layer (variance `1/input`), zero output layer.
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let w1 = Array2::from_shape_fn((hidden, input), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        });
        Mlp {
            w1,
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let pre = self.w1.dot(x) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        self.w2.dot(&hidden) + &self.b2
    }

    /// Forward pass that keeps the intermediates needed for backprop.
    pub fn forward_trace(&self, x: Array1<f64>) -> MlpTrace {
        let pre_act = self.w1.dot(&x) + &self.b1;
        let hidden = pre_act.mapv(|v| v.max(0.0));
        let output = self.w2.dot(&hidden) + &self.b2;
        MlpTrace {
            input: x,
            pre_act,
            hidden,
            output,
        }
    }

    /// Accumulates parameter gradients for one example into `grads`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &Array1<f64>, grads: &mut Mlp) {
        // Output layer.
        for (mut row, &g) in grads.w2.axis_iter_mut(Axis(0)).zip(d_out.iter()) {
            row.scaled_add(g, &trace.hidden);
        }
        grads.b2 += d_out;
        // Backprop through ReLU.
        let d_hidden = self.w2.t().dot(d_out);
        let d_pre: Array1<f64> = d_hidden
            .iter()
            .zip(trace.pre_act.iter())
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect();
        // First layer.
        for (mut row, &g) in grads.w1.axis_iter_mut(Axis(0)).zip(d_pre.iter()) {
            row.scaled_add(g, &trace.input);
        }
        grads.b1 += &d_pre;
    }

    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Intermediates of one tuner forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Array1<f64>,
    pub pre_act: Array1<f64>,
    pub hidden: Array1<f64>,
    pub output: Array1<f64>,
}

/// Everything that trains: rating tokens plus the two tuners.
///
/// All three components always exist, regardless of ablation flags;
/// disabled components simply receive zero gradients. That keeps the
/// flattened parameter layout identical across every configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscaParameters {
    pub rating_tokens: RatingTokenBank,
    /// Content tuner: 5 content probabilities -> embed_dim offset.
    pub content_tuner: Mlp,
    /// Style tuner: 1 squashed ink intensity -> embed_dim offset.
    pub style_tuner: Mlp,
}

impl CscaParameters {
    /// Fresh parameters for the given bundle and configuration, derived
    /// deterministically from `config.seed`.
    pub fn init(bundle: &dyn EncoderBundle, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = bundle.embed_dim();
        let h = config.tuner_hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x63736361_696e6974));
        Ok(CscaParameters {
            rating_tokens: RatingTokenBank::init(bundle, config.tokens_per_level)?,
            content_tuner: Mlp::init(5, h, d, &mut rng),
            style_tuner: Mlp::init(1, h, d, &mut rng),
        })
    }

    /// Zero-filled clone with identical shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        CscaParameters {
            rating_tokens: RatingTokenBank {
                tokens: self
                    .rating_tokens
                    .tokens
                    .iter()
                    .map(|t| TokenEmbeddings::zeros(t.raw_dim()))
                    .collect(),
            },
            content_tuner: Mlp::zeros(
                self.content_tuner.input_dim(),
                self.content_tuner.hidden_dim(),
                self.content_tuner.output_dim(),
            ),
            style_tuner: Mlp::zeros(
                self.style_tuner.input_dim(),
                self.style_tuner.hidden_dim(),
                self.style_tuner.output_dim(),
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.rating_tokens.param_count()
            + self.content_tuner.param_count()
            + self.style_tuner.param_count()
    }

    /// Flattens all parameters into one vector. The layout is fixed: rating
    /// token blocks in level order (row-major), then content tuner
    /// (w1, b1, w2, b2), then style tuner likewise.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for block in &self.rating_tokens.tokens {
            out.extend(block.iter());
        }
        for mlp in [&self.content_tuner, &self.style_tuner] {
            out.extend(mlp.w1.iter());
            out.extend(mlp.b1.iter());
            out.extend(mlp.w2.iter());
            out.extend(mlp.b2.iter());
        }
        out
    }

    /// Writes a flat vector produced by [`CscaParameters::to_flat`] back
    /// into the structured form.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CscaError::DimensionMismatch(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        };
        for block in &mut self.rating_tokens.tokens {
            take(block.as_slice_mut().expect("token blocks are contiguous"));
        }
        for mlp in [&mut self.content_tuner, &mut self.style_tuner] {
            take(mlp.w1.as_slice_mut().expect("contiguous"));
            take(mlp.b1.as_slice_mut().expect("contiguous"));
            take(mlp.w2.as_slice_mut().expect("contiguous"));
            take(mlp.b2.as_slice_mut().expect("contiguous"));
        }
        Ok(())
    }

    /// Replaces every parameter with `scale`-sized Gaussian noise. Used by
    /// gradient checks, where the zero output layers would otherwise make
    /// most directions structurally flat.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let n = self.param_count();
        let flat: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v * scale
            })
            .collect();
        self.assign_flat(&flat).expect("shapes unchanged");
    }

    fn validate_shapes(&self, embed_dim: usize, token_dim: usize, hidden: usize) -> Result<()> {
        if self.rating_tokens.tokens.len() != 5 {
            return Err(CscaError::DimensionMismatch(format!(
                "rating token bank has {} levels, expected 5",
                self.rating_tokens.tokens.len()
            )));
        }
        for (i, block) in self.rating_tokens.tokens.iter().enumerate() {
            if block.nrows() == 0 || block.ncols() != token_dim {
                return Err(CscaError::DimensionMismatch(format!(
                    "rating token block {i} has shape {:?}, expected (>=1, {token_dim})",
                    block.dim()
                )));
            }
        }
        let check_mlp = |name: &str, mlp: &Mlp, input: usize| -> Result<()> {
            if mlp.input_dim() != input || mlp.hidden_dim() != hidden || mlp.output_dim() != embed_dim
            {
                return Err(CscaError::DimensionMismatch(format!(
                    "{name} tuner has dims {}x{}x{}, expected {input}x{hidden}x{embed_dim}",
                    mlp.input_dim(),
                    mlp.hidden_dim(),
                    mlp.output_dim()
                )));
            }
            Ok(())
        };
        check_mlp("content", &self.content_tuner, 5)?;
        check_mlp("style", &self.style_tuner, 1)?;
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Content probability vector `z` for an image embedding: softmax of scaled
/// similarities against the frozen content prompts.
///
/// This always reads the raw image embedding, never the modulated one, so
/// the content pathway stays independent of the trainable parameters.
pub fn content_probs(f_i: &FeatureVector, prompts: &ContentPromptBank, tau: f64) -> Array1<f64> {
    let logits: Array1<f64> = prompts
        .embeddings
        .iter()
        .map(|e| f_i.dot(e) / tau)
        .collect();
    softmax(&logits)
}

/// Adds the enabled modulation offsets to the image embedding.
pub fn modulate(
    f_i: &FeatureVector,
    pi_c: Option<&Array1<f64>>,
    pi_s: Option<&Array1<f64>>,
) -> Result<FeatureVector> {
    let mut out = f_i.clone();
    for pi in [pi_c, pi_s].into_iter().flatten() {
        if pi.len() != out.len() {
            return Err(CscaError::DimensionMismatch(format!(
                "modulation offset has dim {}, embedding has {}",
                pi.len(),
                out.len()
            )));
        }
        out += pi;
    }
    Ok(out)
}

/// Logistic squash applied to the ink intensity before the style tuner.
pub fn squash_style(t_i: f64) -> f64 {
    1.0 / (1.0 + (-t_i).exp())
}

/// Encodes the five level embeddings the score head compares against:
/// learnable rating tokens when LCR is enabled, frozen template embeddings
/// otherwise.
pub fn encode_levels(
    params: &CscaParameters,
    templates: &TemplateLevelBank,
    bundle: &dyn EncoderBundle,
    use_lcr: bool,
) -> Result<Vec<FeatureVector>> {
    if use_lcr {
        params
            .rating_tokens
            .tokens
            .iter()
            .map(|block| bundle.text_encode(block))
            .collect()
    } else {
        Ok(templates.embeddings.clone())
    }
}

/// Distribution over levels for a similarity-ready embedding (already
/// normalized if the configuration calls for it).
pub fn distribution_from_levels(
    f_sim: &FeatureVector,
    levels: &[FeatureVector],
    tau: f64,
) -> Result<ScoreDistribution> {
    if levels.len() != 5 {
        return Err(CscaError::DimensionMismatch(format!(
            "score head needs 5 level embeddings, got {}",
            levels.len()
        )));
    }
    let logits: Array1<f64> = levels.iter().map(|t| f_sim.dot(t) / tau).collect();
    ScoreDistribution::from_logits(&logits)
}

/// Scores a (possibly modulated) embedding against a rating token bank.
pub fn creativity_distribution(
    f_hat: &FeatureVector,
    bank: &RatingTokenBank,
    bundle: &dyn EncoderBundle,
    tau: f64,
    renormalize: bool,
) -> Result<ScoreDistribution> {
    let levels: Vec<FeatureVector> = bank
        .tokens
        .iter()
        .map(|block| bundle.text_encode(block))
        .collect::<Result<_>>()?;
    let f_sim = if renormalize {
        l2_normalize(f_hat).0
    } else {
        f_hat.clone()
    };
    distribution_from_levels(&f_sim, &levels, tau)
}

/// Every intermediate of one example's forward pass that the backward pass
/// needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Content probabilities from the frozen pathway.
    pub z: Array1<f64>,
    /// Squashed ink intensity fed to the style tuner.
    pub style_input: f64,
    pub cct: Option<MlpTrace>,
    pub sct: Option<MlpTrace>,
    /// Modulated embedding before any re-normalization.
    pub f_hat: FeatureVector,
    /// Vector actually compared against the level embeddings.
    pub f_sim: FeatureVector,
    /// Norm divided out to produce `f_sim`, when re-normalization applied
    /// and the norm was above the floor.
    pub renorm: Option<f64>,
    pub probs: Array1<f64>,
    pub score: f64,
}

/// Forward pass for one example.
///
/// `levels` must come from [`encode_levels`] under the same configuration.
pub fn forward_one(
    params: &CscaParameters,
    config: &RunConfig,
    levels: &[FeatureVector],
    prompts: &ContentPromptBank,
    f_i: &FeatureVector,
    t_i: f64,
) -> Result<ForwardTrace> {
    let z = content_probs(f_i, prompts, config.temperature);
    let style_input = squash_style(t_i);

    let cct = if config.ablation.use_cct {
        Some(params.content_tuner.forward_trace(z.clone()))
    } else {
        None
    };
    let sct = if config.ablation.use_sct {
        Some(
            params
                .style_tuner
                .forward_trace(Array1::from_elem(1, style_input)),
        )
    } else {
        None
    };

    let f_hat = modulate(
        f_i,
        cct.as_ref().map(|t| &t.output),
        sct.as_ref().map(|t| &t.output),
    )?;

    let (f_sim, renorm) = if config.score_on_modulated {
        if config.renormalize_modulated {
            let (unit, norm) = l2_normalize(&f_hat);
            if norm > NORM_FLOOR {
                (unit, Some(norm))
            } else {
                (unit, None)
            }
        } else {
            (f_hat.clone(), None)
        }
    } else {
        (f_i.clone(), None)
    };

    let dist = distribution_from_levels(&f_sim, levels, config.temperature)?;
    Ok(ForwardTrace {
        z,
        style_input,
        cct,
        sct,
        f_hat,
        f_sim,
        renorm,
        probs: dist.probs,
        score: dist.score,
    })
}

/// Backward pass for one example.
///
/// `d_score` is the gradient of the batch loss with respect to this
/// example's score. Parameter gradients accumulate into `grads`; gradients
/// with respect to the level embeddings accumulate into `d_levels` so the
/// caller can push them through the text encoder once per batch.
pub fn backward_one(
    params: &CscaParameters,
    config: &RunConfig,
    levels: &[FeatureVector],
    trace: &ForwardTrace,
    d_score: f64,
    grads: &mut CscaParameters,
    d_levels: &mut [FeatureVector],
) {
    let tau = config.temperature;

    // Through the expected score and the softmax in one step:
    // dL/du_s = d_score * p_s * (w_s - score), with w_s the level weight.
    let mut d_logits = Array1::<f64>::zeros(5);
    for s in 0..5 {
        let w = (s as f64 + 1.0) / 5.0;
        d_logits[s] = d_score * trace.probs[s] * (w - trace.score);
    }

    // Similarity logits u_s = (f_sim . T_s) / tau.
    let mut d_f_sim = Array1::<f64>::zeros(trace.f_sim.len());
    for s in 0..5 {
        let g = d_logits[s] / tau;
        d_f_sim.scaled_add(g, &levels[s]);
        d_levels[s].scaled_add(g, &trace.f_sim);
    }

    // Nothing downstream of f_sim is trainable when scoring bypasses the
    // modulated embedding.
    if !config.score_on_modulated {
        return;
    }

    // Through re-normalization f_sim = f_hat / n:
    // dL/df_hat = (g - (g . f_sim) f_sim) / n.
    let d_f_hat = match trace.renorm {
        Some(norm) => {
            let along = d_f_sim.dot(&trace.f_sim);
            (&d_f_sim - &(&trace.f_sim * along)) / norm
        }
        None => d_f_sim,
    };

    // Both offsets enter f_hat additively, so each enabled tuner receives
    // the same upstream gradient.
    if let Some(ref t) = trace.cct {
        params.content_tuner.backward(t, &d_f_hat, &mut grads.content_tuner);
    }
    if let Some(ref t) = trace.sct {
        params.style_tuner.backward(t, &d_f_hat, &mut grads.style_tuner);
    }
}

/// Image features consumed by the scoring head: the frozen embedding and
/// the ink-intensity proxy, both computed from one decode.
pub fn featurize(
    path: &Path,
    stats: &ChannelStats,
    bundle: &dyn EncoderBundle,
) -> Result<(FeatureVector, f64)> {
    let raw = decode_and_invert(path)?;
    let t_i = ink_intensity(&raw);
    let pre = preprocess(&raw, stats);
    let f_i = bundle.image_encode(&pre)?;
    Ok((f_i, t_i))
}

/// Interpretability outputs for one scored drawing.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    /// Expected creativity score in [0.2, 1.0].
    pub score: f64,
    /// Probability over the five creativity levels.
    pub level_probs: Vec<f64>,
    /// Probability over the five content categories.
    pub content_probs: Vec<f64>,
    /// Ink-intensity style proxy.
    pub t_i: f64,
}

/// A fully assembled scoring model: frozen encoders, trainable parameters,
/// frozen prompt banks, preprocessing statistics, and configuration.
pub struct CscaModel {
    pub bundle: Arc<dyn EncoderBundle>,
    pub params: CscaParameters,
    pub prompts: ContentPromptBank,
    pub templates: TemplateLevelBank,
    pub stats: ChannelStats,
    pub config: RunConfig,
}

impl CscaModel {
    pub fn assemble(
        bundle: Arc<dyn EncoderBundle>,
        params: CscaParameters,
        stats: ChannelStats,
        config: RunConfig,
    ) -> Result<Self> {
        config.validate()?;
        params.validate_shapes(
            bundle.embed_dim(),
            bundle.token_dim(),
            config.tuner_hidden_dim,
        )?;
        let prompts = ContentPromptBank::build(bundle.as_ref())?;
        let templates = TemplateLevelBank::build(bundle.as_ref())?;
        Ok(CscaModel {
            bundle,
            params,
            prompts,
            templates,
            stats,
            config,
        })
    }

    /// Fresh model with seeded initial parameters.
    pub fn init(
        bundle: Arc<dyn EncoderBundle>,
        stats: ChannelStats,
        config: RunConfig,
    ) -> Result<Self> {
        let params = CscaParameters::init(bundle.as_ref(), &config)?;
        Self::assemble(bundle, params, stats, config)
    }

    /// Restores a model from a checkpoint, verifying that the supplied
    /// bundle is the one the checkpoint was trained with.
    pub fn from_checkpoint(checkpoint: &Checkpoint, bundle: Arc<dyn EncoderBundle>) -> Result<Self> {
        checkpoint.validate()?;
        if checkpoint.backbone_id != bundle.model_id() {
            return Err(CscaError::Checkpoint(format!(
                "checkpoint was trained with backbone `{}`, got `{}`",
                checkpoint.backbone_id,
                bundle.model_id()
            )));
        }
        if checkpoint.embed_dim != bundle.embed_dim()
            || checkpoint.token_dim != bundle.token_dim()
        {
            return Err(CscaError::Checkpoint(format!(
                "checkpoint dims (d={}, e={}) do not match bundle (d={}, e={})",
                checkpoint.embed_dim,
                checkpoint.token_dim,
                bundle.embed_dim(),
                bundle.token_dim()
            )));
        }
        if checkpoint.backbone_checksum != bundle.param_checksum() {
            return Err(CscaError::Checkpoint(format!(
                "checkpoint encoder checksum {:016x} does not match loaded encoder {:016x}; \
                 the frozen weights differ",
                checkpoint.backbone_checksum,
                bundle.param_checksum()
            )));
        }
        Self::assemble(
            bundle,
            checkpoint.params.clone(),
            checkpoint.channel_stats,
            checkpoint.config.clone(),
        )
    }

    /// Level embeddings under the current parameters and configuration.
    pub fn level_encodings(&self) -> Result<Vec<FeatureVector>> {
        encode_levels(
            &self.params,
            &self.templates,
            self.bundle.as_ref(),
            self.config.ablation.use_lcr,
        )
    }

    /// Scores precomputed features.
    pub fn predict_features(&self, f_i: &FeatureVector, t_i: f64) -> Result<Prediction> {
        let levels = self.level_encodings()?;
        let trace = forward_one(&self.params, &self.config, &levels, &self.prompts, f_i, t_i)?;
        Ok(Prediction {
            score: trace.score,
            level_probs: trace.probs.to_vec(),
            content_probs: trace.z.to_vec(),
            t_i,
        })
    }

    /// Scores an image file end to end.
    pub fn predict_image(&self, path: &Path) -> Result<Prediction> {
        let (f_i, t_i) = featurize(path, &self.stats, self.bundle.as_ref())?;
        self.predict_features(&f_i, t_i)
    }

    /// Serializable snapshot of this model.
    pub fn to_checkpoint(&self, best_epoch: usize, best_val_total: f64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            backbone_id: self.bundle.model_id().to_string(),
            backbone_checksum: self.bundle.param_checksum(),
            embed_dim: self.bundle.embed_dim(),
            token_dim: self.bundle.token_dim(),
            config: self.config.clone(),
            config_fingerprint: self.config.fingerprint(),
            channel_stats: self.stats,
            params: self.params.clone(),
            best_epoch,
            best_val_total,
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk snapshot of a trained model.
///
/// JSON with full-precision floats: values round-trip bit for bit through
/// save and load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub backbone_id: String,
    pub backbone_checksum: u64,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub config: RunConfig,
    pub config_fingerprint: String,
    pub channel_stats: ChannelStats,
    pub params: CscaParameters,
    pub best_epoch: usize,
    pub best_val_total: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut json = serde_json::to_string_pretty(self)
            .map_err(|e| CscaError::Checkpoint(format!("serialization failed: {e}")))?;
        json.push('\n');
        fs::write(path, json).map_err(|e| CscaError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CscaError::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| {
            CscaError::Checkpoint(format!("{}: parse failed: {e}", path.display()))
        })?;
        checkpoint.validate()?;
        Ok(checkpoint)
    }

    /// Structural validation: version, shape consistency, finite values,
    /// and a fingerprint that matches the embedded configuration.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CscaError::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {})",
                self.version, CHECKPOINT_VERSION
            )));
        }
        self.config.validate()?;
        self.params.validate_shapes(
            self.embed_dim,
            self.token_dim,
            self.config.tuner_hidden_dim,
        )?;
        if !self.params.all_finite() {
            return Err(CscaError::Checkpoint(
                "parameters contain non-finite values".into(),
            ));
        }
        if self.config_fingerprint != self.config.fingerprint() {
            return Err(CscaError::Checkpoint(
                "config fingerprint does not match embedded config".into(),
            ));
        }
        if !(self.channel_stats.std.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.channel_stats.mean.iter().all(|m| m.is_finite()))
        {
            return Err(CscaError::Checkpoint(
                "channel statistics are not usable (non-finite or non-positive std)".into(),
            ));
        }
        Ok(())
    }
}
