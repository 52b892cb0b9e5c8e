//! Pixel-side pipeline: decode, invert, channel statistics, standardization,
//! resizing, and the ink-intensity style proxy.
//!
//! Drawings are mostly dark strokes on light paper, so every image is
//! inverted on load (`1 - v/255`). That makes blank paper map to 0 and ink
//! to positive values, which is what both the style proxy and the zero-mean
//! standardization assume.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CscaError, Result};
use crate::types::DrawingRecord;

/// Side length every image is resized to before encoding.
pub const TARGET_SIDE: usize = 224;

/// Floor applied to channel standard deviations during standardization.
pub const STD_FLOOR: f64 = 1e-6;

/// A decoded drawing: three inverted channels in [0, 1], laid out
/// `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(CscaError::DimensionMismatch(format!(
                "image tensor needs 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(CscaError::DimensionMismatch(format!(
                "image tensor has zero area ({h}x{w})"
            )));
        }
        Ok(ImageTensor { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Per-channel mean and standard deviation of inverted training pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Decodes an image file and inverts it into an [`ImageTensor`].
///
/// Grayscale inputs are replicated to three channels; alpha is dropped.
pub fn decode_and_invert(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| CscaError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(CscaError::Image {
            path: path.to_path_buf(),
            detail: "zero-area image".into(),
        });
    }
    invert_rgb8(&rgb)
}

/// Inverts an already-decoded RGB image: each channel value `v` becomes
/// `1 - v/255`.
pub fn invert_rgb8(rgb: &image::RgbImage) -> Result<ImageTensor> {
    let (w, h) = rgb.dimensions();
    let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c, y as usize, x as usize)] = 1.0 - pixel[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(data)
}

/// Ink-intensity style proxy `t_I`: the global mean of the inverted image.
///
/// 0 is blank paper, 1 is fully saturated ink. Computed on the raw inverted
/// image, before any standardization or resizing.
pub fn ink_intensity(img: &ImageTensor) -> f64 {
    img.data.mean().expect("image tensors are non-empty")
}

/// Streaming per-channel accumulator (Welford's method) that merges across
/// parallel shards without losing precision.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAccumulator {
    count: u64,
    mean: [f64; 3],
    m2: [f64; 3],
}

impl ChannelAccumulator {
    pub fn new() -> Self {
        ChannelAccumulator {
            count: 0,
            mean: [0.0; 3],
            m2: [0.0; 3],
        }
    }

    /// Folds in every pixel of one image. `count` tracks pixels per channel.
    pub fn update(&mut self, img: &ImageTensor) {
        for (c, channel) in img.data.axis_iter(Axis(0)).enumerate() {
            let mut count = self.count;
            let mut mean = self.mean[c];
            let mut m2 = self.m2[c];
            for &v in channel.iter() {
                count += 1;
                let delta = v - mean;
                mean += delta / count as f64;
                m2 += delta * (v - mean);
            }
            self.mean[c] = mean;
            self.m2[c] = m2;
        }
        self.count += (img.height() * img.width()) as u64;
    }

    /// Chan et al. parallel merge of two accumulators.
    pub fn merge(mut self, other: ChannelAccumulator) -> ChannelAccumulator {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let n = n1 + n2;
        for c in 0..3 {
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * n2 / n;
            self.m2[c] += other.m2[c] + delta * delta * n1 * n2 / n;
        }
        self.count += other.count;
        self
    }

    /// Finalizes into population statistics, flooring each std at
    /// [`STD_FLOOR`] so later division is safe.
    pub fn finish(&self) -> Result<ChannelStats> {
        if self.count == 0 {
            return Err(CscaError::EmptyInput(
                "channel statistics need at least one image".into(),
            ));
        }
        let mut std = [0.0; 3];
        for (s, &m2) in std.iter_mut().zip(&self.m2) {
            *s = (m2 / self.count as f64).sqrt().max(STD_FLOOR);
        }
        Ok(ChannelStats {
            mean: self.mean,
            std,
        })
    }
}

impl Default for ChannelAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-channel statistics over a set of already-decoded images.
pub fn compute_channel_stats<'a, I>(images: I) -> Result<ChannelStats>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut acc = ChannelAccumulator::new();
    for img in images {
        acc.update(img);
    }
    acc.finish()
}

/// Decodes every record's image in parallel and returns the channel
/// statistics together with each record's ink intensity, keyed by id.
///
/// This is the ingestion workhorse: one decode serves both the statistics
/// pass and the style proxy.
pub fn stats_and_ink(records: &[&DrawingRecord]) -> Result<(ChannelStats, BTreeMap<String, f64>)> {
    if records.is_empty() {
        return Err(CscaError::EmptyInput(
            "channel statistics need at least one record".into(),
        ));
    }
    let per_image: Vec<(String, f64, ChannelAccumulator)> = records
        .par_iter()
        .map(|r| {
            let img = decode_and_invert(Path::new(&r.image_path))?;
            let mut acc = ChannelAccumulator::new();
            acc.update(&img);
            Ok((r.id.clone(), ink_intensity(&img), acc))
        })
        .collect::<Result<_>>()?;

    let mut ink = BTreeMap::new();
    let mut total = ChannelAccumulator::new();
    for (id, t, acc) in per_image {
        ink.insert(id, t);
        total = total.merge(acc);
    }
    Ok((total.finish()?, ink))
}

/// Ink intensities alone (no statistics), for non-training records.
pub fn ink_for_records(records: &[&DrawingRecord]) -> Result<BTreeMap<String, f64>> {
    let pairs: Vec<(String, f64)> = records
        .par_iter()
        .map(|r| {
            let img = decode_and_invert(Path::new(&r.image_path))?;
            Ok((r.id.clone(), ink_intensity(&img)))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().collect())
}

/// Standardizes with training statistics, then resizes to
/// [`TARGET_SIDE`] x [`TARGET_SIDE`].
pub fn preprocess(img: &ImageTensor, stats: &ChannelStats) -> ImageTensor {
    let mut data = img.data.clone();
    for (c, mut channel) in data.axis_iter_mut(Axis(0)).enumerate() {
        let mean = stats.mean[c];
        let std = stats.std[c].max(STD_FLOOR);
        channel.mapv_inplace(|v| (v - mean) / std);
    }
    let resized = bilinear_resize(&data, TARGET_SIDE, TARGET_SIDE);
    ImageTensor { data: resized }
}

/// Bilinear resampling with half-pixel centers and edge clamping. Returns
/// the input unchanged (bit for bit) when it is already the target size.
fn bilinear_resize(data: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = data.dim();
    if h == out_h && w == out_w {
        return data.clone();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = data[(ch, y0, x0)] * (1.0 - fx) + data[(ch, y0, x1)] * fx;
                let bottom = data[(ch, y1, x0)] * (1.0 - fx) + data[(ch, y1, x1)] * fx;
                out[(ch, oy, ox)] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Reads an `id,style_scalar` cache file.
pub fn read_style_cache(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CscaError::MalformedRow {
            path: path.to_path_buf(),
            row: 1,
            detail: e.to_string(),
        })?;
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| CscaError::MalformedRow {
            path: path.to_path_buf(),
            row: row_no,
            detail: e.to_string(),
        })?;
        if row.len() != 2 {
            return Err(CscaError::MalformedRow {
                path: path.to_path_buf(),
                row: row_no,
                detail: format!("expected 2 fields, got {}", row.len()),
            });
        }
        let value: f64 = row[1].parse().map_err(|e| CscaError::MalformedRow {
            path: path.to_path_buf(),
            row: row_no,
            detail: format!("bad style_scalar `{}`: {}", &row[1], e),
        })?;
        out.insert(row[0].to_string(), value);
    }
    Ok(out)
}

/// Writes an `id,style_scalar` cache file, sorted by id.
pub fn write_style_cache(path: &Path, values: &BTreeMap<String, f64>) -> Result<()> {
    let wrap = |e: csv::Error| CscaError::MalformedRow {
        path: path.to_path_buf(),
        row: 0,
        detail: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(wrap)?;
    writer.write_record(["id", "style_scalar"]).map_err(wrap)?;
    for (id, v) in values {
        writer
            .write_record([id.as_str(), &format!("{}", v)])
            .map_err(wrap)?;
    }
    writer.flush().map_err(|e| CscaError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn solid_image(w: u32, h: u32, value: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([value, value, value]))
    }

    #[test]
    fn inversion_maps_white_to_zero_and_black_to_one() {
        let white = invert_rgb8(&solid_image(4, 4, 255)).unwrap();
        assert!(white.data.iter().all(|&v| v == 0.0));

        let black = invert_rgb8(&solid_image(4, 4, 0)).unwrap();
        assert!(black.data.iter().all(|&v| v == 1.0));

        let mid = invert_rgb8(&solid_image(2, 2, 128)).unwrap();
        let expected = 1.0 - 128.0 / 255.0;
        assert!(mid.data.iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn ink_intensity_counts_dark_fraction_exactly() {
        // 3 black pixels out of 12 total: intensity is exactly 0.25 after
        // inversion.
        let mut img = solid_image(4, 3, 255);
        img.put_pixel(0, 0, Rgb([0, 0, 0]));
        img.put_pixel(1, 0, Rgb([0, 0, 0]));
        img.put_pixel(2, 0, Rgb([0, 0, 0]));
        let tensor = invert_rgb8(&img).unwrap();
        assert_eq!(ink_intensity(&tensor), 0.25);
    }

    #[test]
    fn welford_matches_two_pass_oracle() {
        // Oracle: naive two-pass mean and population variance.
        let mut rng_state = 0x12345u64;
        let mut next = move || {
            // xorshift64, plenty for test data
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut images = Vec::new();
        for _ in 0..5 {
            let data = Array3::from_shape_fn((3, 7, 5), |_| next());
            images.push(ImageTensor::new(data).unwrap());
        }

        let stats = compute_channel_stats(images.iter()).unwrap();

        for c in 0..3 {
            let values: Vec<f64> = images
                .iter()
                .flat_map(|img| img.data.index_axis(Axis(0), c).iter().copied().collect::<Vec<_>>())
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((stats.mean[c] - mean).abs() < 1e-12);
            assert!((stats.std[c] - var.sqrt().max(STD_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let a = ImageTensor::new(Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            (c + 2 * y + 3 * x) as f64 / 10.0
        }))
        .unwrap();
        let b = ImageTensor::new(Array3::from_shape_fn((3, 6, 2), |(c, y, x)| {
            (5 * c + y + 7 * x) as f64 / 20.0
        }))
        .unwrap();

        let mut seq = ChannelAccumulator::new();
        seq.update(&a);
        seq.update(&b);

        let mut left = ChannelAccumulator::new();
        left.update(&a);
        let mut right = ChannelAccumulator::new();
        right.update(&b);
        let merged = left.merge(right);

        let s1 = seq.finish().unwrap();
        let s2 = merged.finish().unwrap();
        for c in 0..3 {
            assert!((s1.mean[c] - s2.mean[c]).abs() < 1e-12);
            assert!((s1.std[c] - s2.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_gets_floored_std() {
        let img = invert_rgb8(&solid_image(8, 8, 200)).unwrap();
        let stats = compute_channel_stats([&img]).unwrap();
        for c in 0..3 {
            assert_eq!(stats.std[c], STD_FLOOR);
        }
    }

    #[test]
    fn preprocess_standardizes_to_zero_mean_unit_std() {
        // Image with genuine spread: half dark, half light.
        let mut img = solid_image(16, 16, 255);
        for y in 0..16 {
            for x in 0..8 {
                img.put_pixel(x, y, Rgb([10, 10, 10]));
            }
        }
        let tensor = invert_rgb8(&img).unwrap();
        let stats = compute_channel_stats([&tensor]).unwrap();
        let pre = preprocess(&tensor, &stats);
        assert_eq!(pre.height(), TARGET_SIDE);
        assert_eq!(pre.width(), TARGET_SIDE);

        // The standardized-then-resized image keeps near-zero mean: bilinear
        // resampling is an affine combination of pixels, and here both pixel
        // populations are balanced.
        let mean = pre.data.mean().unwrap();
        assert!(mean.abs() < 1e-6, "mean {mean}");
    }

    #[test]
    fn resize_is_identity_at_target_size() {
        let data = Array3::from_shape_fn((3, TARGET_SIDE, TARGET_SIDE), |(c, y, x)| {
            (c as f64) + (y as f64) * 0.01 + (x as f64) * 0.001
        });
        let img = ImageTensor::new(data.clone()).unwrap();
        let stats = ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let pre = preprocess(&img, &stats);
        assert_eq!(pre.data, data);
    }

    #[test]
    fn resize_preserves_constant_images() {
        // Interpolating a constant field must reproduce it exactly at any
        // size, including non-square and upscaling cases.
        for (h, w) in [(10usize, 17usize), (300, 60), (224, 224), (5, 5)] {
            let data = Array3::from_elem((3, h, w), 0.37);
            let out = bilinear_resize(&data, TARGET_SIDE, TARGET_SIDE);
            assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_interpolates_linear_ramps_exactly() {
        // A linear ramp is reproduced exactly by bilinear interpolation at
        // interior points (edges clamp).
        let h = 64usize;
        let w = 64usize;
        let data = Array3::from_shape_fn((3, h, w), |(_, _, x)| x as f64);
        let out = bilinear_resize(&data, 32, 32);
        let scale = w as f64 / 32.0;
        for ox in 1..31 {
            let expected = (ox as f64 + 0.5) * scale - 0.5;
            let got = out[(0, 16, ox)];
            assert!((got - expected).abs() < 1e-9, "ox={ox} {got} vs {expected}");
        }
    }

    #[test]
    fn style_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.csv");
        let mut values = BTreeMap::new();
        values.insert("d1".to_string(), 0.125);
        values.insert("d2".to_string(), 0.5);
        write_style_cache(&path, &values).unwrap();
        let back = read_style_cache(&path).unwrap();
        assert_eq!(back, values);
    }

    #[test]
    fn decode_and_invert_reads_png_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = solid_image(6, 4, 255);
        img.put_pixel(0, 0, Rgb([0, 0, 0]));
        img.save(&path).unwrap();
        let tensor = decode_and_invert(&path).unwrap();
        assert_eq!(tensor.height(), 4);
        assert_eq!(tensor.width(), 6);
        assert_eq!(tensor.data[(0, 0, 0)], 1.0);
        assert_eq!(tensor.data[(0, 0, 1)], 0.0);
        assert_eq!(ink_intensity(&tensor), 1.0 / 24.0);
    }

    #[test]
    fn decode_missing_file_is_an_image_error() {
        let err = decode_and_invert(Path::new("/nonexistent/img.png")).unwrap_err();
        assert!(matches!(err, CscaError::Image { .. }));
    }
}
