//! Deterministic synthetic drawing corpus for tests and demos.
//!
//! Every image is a 64x64 black-on-white PNG whose ink fraction is an exact
//! dyadic rational, so the ink-intensity proxy computed downstream equals
//! `black_pixels / 4096` bitwise. Ratings increase linearly with ink, which
//! makes the corpus easy to overfit and gives analyses a known positive
//! style/rating correlation.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CscaError, Result};
use crate::types::{ContentLabel, Split};
use crate::util::splitmix64;

const SIDE: u32 = 64;
const PIXELS: usize = (SIDE * SIDE) as usize;

/// Paths of a generated corpus.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub annotations: PathBuf,
}

/// Expected ink fraction of image `i` out of `n`: the exact value the
/// ingestion pipeline recovers from the PNG.
pub fn ink_fraction(i: usize, n: usize) -> f64 {
    black_pixels(i, n) as f64 / PIXELS as f64
}

fn black_pixels(i: usize, n: usize) -> usize {
    let f = (i as f64 + 0.5) / n as f64;
    (f * PIXELS as f64).round() as usize
}

/// Raw rating assigned to image `i`: linear in ink on the 1..=5 scale.
pub fn rating_raw(i: usize, n: usize) -> f64 {
    1.0 + 4.0 * ((i as f64 + 0.5) / n as f64)
}

/// Generates `n` images plus manifest and annotation CSVs under `dir`.
///
/// Image `i` contains `round(((i + 0.5) / n) * 4096)` black pixels filled
/// row-major from a seeded wrap-around offset, so embeddings vary with
/// both ink amount and placement while the ink fraction stays exact.
/// Every eighth image goes to the validation split; content labels cycle
/// through all five categories. Output is byte-deterministic in `(n, seed)`.
pub fn generate(dir: &Path, n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n < 8 {
        return Err(CscaError::TooFewSamples {
            context: "synthetic corpus (validation split needs every eighth image)".into(),
            needed: 8,
            got: n,
        });
    }
    fs::create_dir_all(dir).map_err(|e| CscaError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x73796e7468_u64));

    let mut manifest = String::from("id,image_path,rating_raw,split\n");
    let mut annotations = String::from("id,content_label\n");

    for i in 0..n {
        let id = format!("syn{i:04}");
        let path = dir.join(format!("{id}.png"));
        let k = black_pixels(i, n);
        let offset = rng.random_range(0..PIXELS);

        let mut img = RgbImage::from_pixel(SIDE, SIDE, image::Rgb([255, 255, 255]));
        for j in 0..k {
            let p = (offset + j) % PIXELS;
            let (x, y) = (p as u32 % SIDE, p as u32 / SIDE);
            img.put_pixel(x, y, image::Rgb([0, 0, 0]));
        }
        img.save(&path).map_err(|e| CscaError::Image {
            path: path.clone(),
            detail: e.to_string(),
        })?;

        let split = if i % 8 == 7 { Split::Val } else { Split::Train };
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            id,
            path.display(),
            rating_raw(i, n),
            split
        ));
        annotations.push_str(&format!("{},{}\n", id, ContentLabel::ALL[i % 5]));
    }

    let manifest_path = dir.join("manifest.csv");
    let annotations_path = dir.join("annotations.csv");
    fs::write(&manifest_path, manifest).map_err(|e| CscaError::io(&manifest_path, e))?;
    fs::write(&annotations_path, annotations).map_err(|e| CscaError::io(&annotations_path, e))?;

    Ok(SyntheticDataset {
        dir: dir.to_path_buf(),
        manifest: manifest_path,
        annotations: annotations_path,
    })
}
