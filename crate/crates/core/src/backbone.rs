//! Frozen encoder bundles.
//!
//! The scoring model never updates encoder weights; it only needs five
//! operations from them: encode an image to a joint-space vector, tokenize
//! text, look up token embeddings, encode token embeddings to a joint-space
//! vector, and pull gradients back through that text encoding. The
//! [`EncoderBundle`] trait captures exactly that surface.
//!
//! Two implementations ship here. [`ToyBundle`] is a small, seeded,
//! fully deterministic encoder pair used by tests and the synthetic
//! pipeline. [`ExportedBundle`] loads real projection weights from a
//! checksummed binary export file, so production joint spaces (such as a
//! 768-dimensional CLIP ViT-L/14 export) plug in without this crate linking
//! any deep-learning runtime.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CscaError, Result};
use crate::imaging::ImageTensor;
use crate::util::{fnv1a32, splitmix64, Fnv64};

/// Joint-space feature vector (length `embed_dim`).
pub type FeatureVector = Array1<f64>;

/// Token embedding block: one row per token (shape `n_tokens x token_dim`).
pub type TokenEmbeddings = Array2<f64>;

/// Opaque token identifier produced by a bundle's tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenId(pub u32);

/// Norms smaller than this are treated as zero during L2 normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Pooling grid side for image encoding: images reduce to an 8x8 grid of
/// channel means before projection.
pub const POOL_GRID: usize = 8;

/// Pooled feature length: 3 channels x 8 x 8.
pub const POOL_FEATURES: usize = 3 * POOL_GRID * POOL_GRID;

/// A frozen image/text encoder pair sharing one joint embedding space.
///
/// Implementations must be deterministic: the same input always produces
/// bitwise-identical output, and `param_checksum` commits to every weight so
/// callers can verify nothing drifted between runs.
pub trait EncoderBundle: Send + Sync {
    /// Stable identifier, recorded in checkpoints.
    fn model_id(&self) -> &str;

    /// Dimensionality of the joint embedding space.
    fn embed_dim(&self) -> usize;

    /// Dimensionality of individual token embeddings.
    fn token_dim(&self) -> usize;

    /// Encodes a preprocessed image to an L2-normalized joint-space vector.
    fn image_encode(&self, img: &ImageTensor) -> Result<FeatureVector>;

    /// Splits text into token ids. Deterministic; may return an empty list
    /// for text with no alphanumeric content.
    fn tokenize(&self, text: &str) -> Vec<TokenId>;

    /// Looks up the frozen embedding row for each token id.
    fn token_embeddings(&self, ids: &[TokenId]) -> TokenEmbeddings;

    /// Encodes a token-embedding block to an L2-normalized joint-space
    /// vector. The block may contain learned rows that never came from
    /// `token_embeddings`.
    fn text_encode(&self, tokens: &TokenEmbeddings) -> Result<FeatureVector>;

    /// Vector-Jacobian product of [`EncoderBundle::text_encode`]: given the
    /// gradient of some scalar loss with respect to the encoded vector,
    /// returns the gradient with respect to the token-embedding block.
    fn text_encode_vjp(
        &self,
        tokens: &TokenEmbeddings,
        cotangent: &FeatureVector,
    ) -> Result<TokenEmbeddings>;

    /// Digest over all frozen parameters.
    fn param_checksum(&self) -> u64;
}

impl fmt::Debug for dyn EncoderBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EncoderBundle(id={}, d={}, e={})",
            self.model_id(),
            self.embed_dim(),
            self.token_dim()
        )
    }
}

/// L2-normalizes a vector, returning the normalized copy and the original
/// norm. Vectors with norm below [`NORM_FLOOR`] pass through unscaled.
pub fn l2_normalize(v: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = v.dot(v).sqrt();
    if norm > NORM_FLOOR {
        (v / norm, norm)
    } else {
        (v.clone(), norm)
    }
}

/// Shared math for both bundle implementations: average-pool the image to a
/// fixed grid, apply a frozen linear map, and L2-normalize; mean-pool token
/// embeddings, apply a frozen linear map, and L2-normalize.
#[derive(Debug, Clone)]
pub struct PooledLinearCore {
    /// Image projection, shape `embed_dim x POOL_FEATURES`.
    pub w_img: Array2<f64>,
    /// Text projection, shape `embed_dim x token_dim`.
    pub w_txt: Array2<f64>,
    /// Seed from which per-token-id embedding rows are derived.
    pub token_seed: u64,
}

impl PooledLinearCore {
    pub fn embed_dim(&self) -> usize {
        self.w_img.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.w_txt.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.w_img.ncols() != POOL_FEATURES {
            return Err(CscaError::Backbone(format!(
                "image projection expects {} pooled features, got {}",
                POOL_FEATURES,
                self.w_img.ncols()
            )));
        }
        if self.w_img.nrows() != self.w_txt.nrows() {
            return Err(CscaError::Backbone(format!(
                "image and text projections disagree on embed_dim: {} vs {}",
                self.w_img.nrows(),
                self.w_txt.nrows()
            )));
        }
        if self.w_img.nrows() == 0 || self.w_txt.ncols() == 0 {
            return Err(CscaError::Backbone("zero-sized projection".into()));
        }
        if self.w_img.iter().chain(self.w_txt.iter()).any(|v| !v.is_finite()) {
            return Err(CscaError::Backbone(
                "projection weights contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Average-pools each channel over a [`POOL_GRID`] x [`POOL_GRID`] grid.
    ///
    /// Block boundaries are `floor(g * side / POOL_GRID)`. For sides smaller
    /// than the grid a block is widened to one pixel, so every cell always
    /// averages at least one value.
    fn pool(&self, img: &ImageTensor) -> Array1<f64> {
        let (_, h, w) = img.data.dim();
        // lo < side holds for every g because g <= POOL_GRID - 1, so the
        // widened upper bound never leaves the image.
        let bounds = |g: usize, side: usize| {
            let lo = g * side / POOL_GRID;
            let hi = ((g + 1) * side / POOL_GRID).max(lo + 1).min(side);
            (lo, hi)
        };
        let mut pooled = Array1::<f64>::zeros(POOL_FEATURES);
        for c in 0..3 {
            for gy in 0..POOL_GRID {
                let (y0, y1) = bounds(gy, h);
                for gx in 0..POOL_GRID {
                    let (x0, x1) = bounds(gx, w);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += img.data[(c, y, x)];
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    pooled[c * POOL_GRID * POOL_GRID + gy * POOL_GRID + gx] = sum / count;
                }
            }
        }
        pooled
    }

    fn image_encode(&self, img: &ImageTensor) -> Result<FeatureVector> {
        let pooled = self.pool(img);
        let projected = self.w_img.dot(&pooled);
        Ok(l2_normalize(&projected).0)
    }

    fn text_encode(&self, tokens: &TokenEmbeddings) -> Result<FeatureVector> {
        if tokens.nrows() == 0 {
            return Err(CscaError::EmptyInput(
                "text encoding needs at least one token".into(),
            ));
        }
        if tokens.ncols() != self.token_dim() {
            return Err(CscaError::DimensionMismatch(format!(
                "token embeddings have dim {}, bundle expects {}",
                tokens.ncols(),
                self.token_dim()
            )));
        }
        let mean = tokens.mean_axis(Axis(0)).expect("nrows checked above");
        let projected = self.w_txt.dot(&mean);
        Ok(l2_normalize(&projected).0)
    }

    fn text_encode_vjp(
        &self,
        tokens: &TokenEmbeddings,
        cotangent: &FeatureVector,
    ) -> Result<TokenEmbeddings> {
        if tokens.nrows() == 0 {
            return Err(CscaError::EmptyInput(
                "text encoding needs at least one token".into(),
            ));
        }
        if tokens.ncols() != self.token_dim() {
            return Err(CscaError::DimensionMismatch(format!(
                "token embeddings have dim {}, bundle expects {}",
                tokens.ncols(),
                self.token_dim()
            )));
        }
        if cotangent.len() != self.embed_dim() {
            return Err(CscaError::DimensionMismatch(format!(
                "cotangent has dim {}, bundle expects {}",
                cotangent.len(),
                self.embed_dim()
            )));
        }
        let mean = tokens.mean_axis(Axis(0)).expect("nrows checked above");
        let projected = self.w_txt.dot(&mean);
        let (unit, norm) = l2_normalize(&projected);

        // Backprop through y = b/|b|: dL/db = (g - (g.y) y) / |b|.
        // Below the norm floor the normalization is the identity map.
        let d_projected = if norm > NORM_FLOOR {
            let along = cotangent.dot(&unit);
            (cotangent - &(unit * along)) / norm
        } else {
            cotangent.clone()
        };

        // Backprop through b = W m: dL/dm = W^T dL/db.
        let d_mean = self.w_txt.t().dot(&d_projected);

        // Backprop through the token mean: each row receives d_mean / n.
        let n = tokens.nrows();
        let row = &d_mean / n as f64;
        let mut out = TokenEmbeddings::zeros((n, self.token_dim()));
        for mut r in out.axis_iter_mut(Axis(0)) {
            r.assign(&row);
        }
        Ok(out)
    }

    /// Embedding row for one token id, derived from `token_seed`.
    fn token_row(&self, id: TokenId) -> Array1<f64> {
        let e = self.token_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            self.token_seed ^ (id.0 as u64).wrapping_mul(0x9E3779B97F4A7C15),
        ));
        let scale = 1.0 / (e as f64).sqrt();
        Array1::from_shape_fn(e, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
    }

    fn token_embeddings(&self, ids: &[TokenId]) -> TokenEmbeddings {
        let e = self.token_dim();
        let mut out = TokenEmbeddings::zeros((ids.len(), e));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.token_row(id));
        }
        out
    }

    fn checksum(&self, model_id: &str) -> u64 {
        let mut h = Fnv64::new();
        h.update(model_id.as_bytes());
        h.update_u32(self.embed_dim() as u32);
        h.update_u32(self.token_dim() as u32);
        h.update_u64(self.token_seed);
        for &v in self.w_img.iter() {
            h.update_f64(v);
        }
        for &v in self.w_txt.iter() {
            h.update_f64(v);
        }
        h.finish()
    }
}

/// Whitespace/punctuation tokenizer: lowercases, splits on non-alphanumeric
/// runs, and hashes each word with FNV-1a.
fn hash_tokenize(text: &str) -> Vec<TokenId> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|word| TokenId(fnv1a32(word.as_bytes())))
        .collect()
}

/// Seeded toy encoder pair for tests and synthetic experiments.
///
/// Projections are Gaussian with variance `1/fan_in`, drawn from a ChaCha
/// stream keyed by `seed`, so two bundles with equal `(embed_dim, seed)`
/// are identical in every bit.
#[derive(Debug)]
pub struct ToyBundle {
    core: PooledLinearCore,
    seed: u64,
}

/// Default token embedding width for [`ToyBundle`].
pub const TOY_TOKEN_DIM: usize = 32;

/// Builds a [`ToyBundle`] with `embed_dim = d` and the default token width.
///
/// `d` must be at least 8 so the joint space has room for five distinct
/// level directions.
pub fn toy_bundle(d: usize, seed: u64) -> Result<ToyBundle> {
    toy_bundle_with_token_dim(d, TOY_TOKEN_DIM, seed)
}

/// [`toy_bundle`] with an explicit token embedding width.
pub fn toy_bundle_with_token_dim(d: usize, e: usize, seed: u64) -> Result<ToyBundle> {
    if d < 8 {
        return Err(CscaError::Config(format!(
            "toy bundle needs embed_dim >= 8, got {d}"
        )));
    }
    if e == 0 {
        return Err(CscaError::Config("toy bundle needs token_dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x746f795f62756e64));
    let img_scale = 1.0 / (POOL_FEATURES as f64).sqrt();
    let w_img = Array2::from_shape_fn((d, POOL_FEATURES), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * img_scale
    });
    let txt_scale = 1.0 / (e as f64).sqrt();
    let w_txt = Array2::from_shape_fn((d, e), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * txt_scale
    });
    let core = PooledLinearCore {
        w_img,
        w_txt,
        token_seed: splitmix64(seed ^ 0x746f6b656e73),
    };
    core.validate()?;
    Ok(ToyBundle { core, seed })
}

impl ToyBundle {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Writes this bundle's weights as an encoder export file under the
    /// given model id. Loading the file back yields a bundle with
    /// identical encodings.
    pub fn export(&self, path: &Path, model_id: &str) -> Result<()> {
        ExportedBundle::write_file(
            path,
            model_id,
            &self.core.w_img,
            &self.core.w_txt,
            self.core.token_seed,
        )
    }
}

impl EncoderBundle for ToyBundle {
    fn model_id(&self) -> &str {
        "toy"
    }

    fn embed_dim(&self) -> usize {
        self.core.embed_dim()
    }

    fn token_dim(&self) -> usize {
        self.core.token_dim()
    }

    fn image_encode(&self, img: &ImageTensor) -> Result<FeatureVector> {
        self.core.image_encode(img)
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        hash_tokenize(text)
    }

    fn token_embeddings(&self, ids: &[TokenId]) -> TokenEmbeddings {
        self.core.token_embeddings(ids)
    }

    fn text_encode(&self, tokens: &TokenEmbeddings) -> Result<FeatureVector> {
        self.core.text_encode(tokens)
    }

    fn text_encode_vjp(
        &self,
        tokens: &TokenEmbeddings,
        cotangent: &FeatureVector,
    ) -> Result<TokenEmbeddings> {
        self.core.text_encode_vjp(tokens, cotangent)
    }

    fn param_checksum(&self) -> u64 {
        self.core.checksum("toy")
    }
}

/// Magic bytes opening an encoder export file.
pub const ENCODER_MAGIC: &[u8; 8] = b"CSCAENC1";

/// Bundle backed by projection weights loaded from an export file.
///
/// The file layout is little-endian and checksummed:
///
/// ```text
/// magic      8 bytes   "CSCAENC1"
/// id_len     u32       length of model id in bytes
/// model_id   id_len    UTF-8 model identifier
/// embed_dim  u32
/// token_dim  u32
/// token_seed u64
/// w_img      embed_dim * 192 f64, row-major
/// w_txt      embed_dim * token_dim f64, row-major
/// checksum   u64       FNV-1a over all preceding bytes
/// ```
#[derive(Debug)]
pub struct ExportedBundle {
    core: PooledLinearCore,
    model_id: String,
}

impl ExportedBundle {
    /// Reads and fully validates an export file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CscaError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CscaError::Backbone(detail) => {
                CscaError::Backbone(format!("{}: {detail}", path.display()))
            }
            other => other,
        })
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor::new(bytes);
        let magic = cursor.take(8)?;
        if magic != ENCODER_MAGIC {
            return Err(CscaError::Backbone(
                "not an encoder export file (bad magic)".into(),
            ));
        }
        let id_len = cursor.read_u32()? as usize;
        if id_len == 0 || id_len > 256 {
            return Err(CscaError::Backbone(format!(
                "implausible model id length {id_len}"
            )));
        }
        let id_bytes = cursor.take(id_len)?;
        let model_id = std::str::from_utf8(id_bytes)
            .map_err(|_| CscaError::Backbone("model id is not UTF-8".into()))?
            .to_string();
        let d = cursor.read_u32()? as usize;
        let e = cursor.read_u32()? as usize;
        if d == 0 || d > 65536 || e == 0 || e > 65536 {
            return Err(CscaError::Backbone(format!(
                "implausible dimensions d={d}, e={e}"
            )));
        }
        let token_seed = cursor.read_u64()?;
        let w_img = cursor.read_f64_matrix(d, POOL_FEATURES)?;
        let w_txt = cursor.read_f64_matrix(d, e)?;
        let body_end = cursor.pos;
        let stored = cursor.read_u64()?;
        cursor.expect_end()?;

        let computed = crate::util::fnv1a64(&bytes[..body_end]);
        if stored != computed {
            return Err(CscaError::Backbone(format!(
                "corrupt weights: checksum mismatch (stored {stored:016x}, computed {computed:016x})"
            )));
        }

        let core = PooledLinearCore {
            w_img,
            w_txt,
            token_seed,
        };
        core.validate()?;
        Ok(ExportedBundle { core, model_id })
    }

    /// Writes an export file in the documented layout.
    pub fn write_file(
        path: &Path,
        model_id: &str,
        w_img: &Array2<f64>,
        w_txt: &Array2<f64>,
        token_seed: u64,
    ) -> Result<()> {
        if model_id.is_empty() || model_id.len() > 256 {
            return Err(CscaError::Backbone(format!(
                "model id length {} out of range 1..=256",
                model_id.len()
            )));
        }
        let core = PooledLinearCore {
            w_img: w_img.clone(),
            w_txt: w_txt.clone(),
            token_seed,
        };
        core.validate()?;

        let mut buf = Vec::new();
        buf.extend_from_slice(ENCODER_MAGIC);
        buf.extend_from_slice(&(model_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(model_id.as_bytes());
        buf.extend_from_slice(&(w_img.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(w_txt.ncols() as u32).to_le_bytes());
        buf.extend_from_slice(&token_seed.to_le_bytes());
        for &v in w_img.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in w_txt.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = crate::util::fnv1a64(&buf);
        buf.extend_from_slice(&checksum.to_le_bytes());
        fs::write(path, buf).map_err(|e| CscaError::io(path, e))?;
        Ok(())
    }
}

impl EncoderBundle for ExportedBundle {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_dim(&self) -> usize {
        self.core.embed_dim()
    }

    fn token_dim(&self) -> usize {
        self.core.token_dim()
    }

    fn image_encode(&self, img: &ImageTensor) -> Result<FeatureVector> {
        self.core.image_encode(img)
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        hash_tokenize(text)
    }

    fn token_embeddings(&self, ids: &[TokenId]) -> TokenEmbeddings {
        self.core.token_embeddings(ids)
    }

    fn text_encode(&self, tokens: &TokenEmbeddings) -> Result<FeatureVector> {
        self.core.text_encode(tokens)
    }

    fn text_encode_vjp(
        &self,
        tokens: &TokenEmbeddings,
        cotangent: &FeatureVector,
    ) -> Result<TokenEmbeddings> {
        self.core.text_encode_vjp(tokens, cotangent)
    }

    fn param_checksum(&self) -> u64 {
        self.core.checksum(&self.model_id)
    }
}

/// Loads a production encoder by model id.
///
/// Only `vit-l-14` is recognized today; its export must carry a matching
/// embedded id. The embedding dimension is read from the weight shapes, not
/// assumed. Use [`toy_bundle`] for the test encoder.
pub fn pretrained_bundle(model_id: &str, weights_path: &Path) -> Result<Arc<dyn EncoderBundle>> {
    if model_id != "vit-l-14" {
        return Err(CscaError::Config(format!(
            "unknown model id `{model_id}` (expected `vit-l-14`; the toy encoder is constructed directly)"
        )));
    }
    let bundle = ExportedBundle::load(weights_path)?;
    if bundle.model_id() != model_id {
        return Err(CscaError::Backbone(format!(
            "{}: weights are for model `{}`, requested `{}`",
            weights_path.display(),
            bundle.model_id(),
            model_id
        )));
    }
    Ok(Arc::new(bundle))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CscaError::Backbone("truncated weights file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn read_f64_matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CscaError::Backbone("matrix size overflow".into()))?;
        let bytes = self.take(n * 8)?;
        let mut out = Array2::<f64>::zeros((rows, cols));
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            out[(i / cols, i % cols)] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CscaError::Backbone(format!(
                "{} trailing bytes after checksum",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
