//! Image decoding, bilinear resize, and per-channel standardization.

use std::path::Path;

use crate::error::DataError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::stats::ChannelStats;

/// A decoded RGB image as planar `[3, h, w]` floats in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), 3 * height * width);
        RawImage { height, width, data }
    }

    #[inline]
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[channel * self.height * self.width + y * self.width + x]
    }

    /// Bilinear sample at a fractional position with edge-replicate fill.
    pub fn sample(&self, channel: usize, y: f32, x: f32) -> f32 {
        let clamp = |v: f32, hi: usize| v.max(0.0).min((hi - 1) as f32);
        let y = clamp(y, self.height);
        let x = clamp(x, self.width);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let p00 = self.at(channel, y0, x0);
        let p01 = self.at(channel, y0, x1);
        let p10 = self.at(channel, y1, x0);
        let p11 = self.at(channel, y1, x1);
        p00 * (1.0 - fy) * (1.0 - fx) + p01 * (1.0 - fy) * fx + p10 * fy * (1.0 - fx) + p11 * fy * fx
    }
}

/// Decode a JPEG/PNG file to planar RGB floats in [0, 1].
pub fn decode_image(path: &Path) -> Result<RawImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, pixel) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = pixel[c] as f32 / 255.0;
        }
    }
    Ok(RawImage::new(h, w, data))
}

/// Direct bilinear resize (no aspect preservation). Equal extents return the
/// pixels unchanged.
pub fn resize_bilinear(img: &RawImage, out_h: usize, out_w: usize) -> RawImage {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    let scale_y = img.height as f32 / out_h as f32;
    let scale_x = img.width as f32 / out_w as f32;
    let mut data = vec![0.0f32; 3 * out_h * out_w];
    for c in 0..3 {
        for y in 0..out_h {
            let src_y = (y as f32 + 0.5) * scale_y - 0.5;
            for x in 0..out_w {
                let src_x = (x as f32 + 0.5) * scale_x - 0.5;
                data[c * out_h * out_w + y * out_w + x] = img.sample(c, src_y, src_x);
            }
        }
    }
    RawImage::new(out_h, out_w, data)
}

/// Channel-first tensor from a raw image.
pub fn to_tensor<T: Scalar>(img: &RawImage) -> Tensor<T> {
    let data: Vec<T> = img.data.iter().map(|&v| T::from_f64(v as f64)).collect();
    Tensor::new(&[3, img.height, img.width], data).expect("sized image")
}

/// Per-channel standardization `x <- (x - mean_c) / std_c` in place.
pub fn standardize(img: &mut RawImage, stats: &ChannelStats) {
    let hw = img.height * img.width;
    for c in 0..3 {
        let mean = stats.mean[c] as f32;
        let std = stats.std[c] as f32;
        for v in &mut img.data[c * hw..(c + 1) * hw] {
            *v = (*v - mean) / std;
        }
    }
}

/// Resize to the target extent, standardize with the training-split
/// statistics, and emit a `[3, out_h, out_w]` tensor.
pub fn preprocess<T: Scalar>(
    img: &RawImage,
    stats: &ChannelStats,
    out_h: usize,
    out_w: usize,
) -> Tensor<T> {
    let mut resized = resize_bilinear(img, out_h, out_w);
    standardize(&mut resized, stats);
    to_tensor(&resized)
}
