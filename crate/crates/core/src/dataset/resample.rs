use image::imageops::{self, FilterType};
use image::Rgb32FImage;

use super::{ImageRecord, ResolutionTag};
use crate::error::{FtwaError, Result};

/// Triangle-filter resize; on minification the filter support widens with
/// the scale factor, which gives anti-aliased bilinear averaging.
pub fn resize_bilinear(img: &Rgb32FImage, height: u32, width: u32) -> Rgb32FImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

/// Degrades `image` by an integer factor `rate`, producing a
/// `(⌊H/r⌋, ⌊W/r⌋)` record tagged as synthetic low resolution.
pub fn downsample(image: &ImageRecord, rate: u32) -> Result<ImageRecord> {
    if rate < 2 {
        return Err(FtwaError::DegenerateInput(format!(
            "down-sampling rate must be at least 2, got {rate}"
        )));
    }
    let (h, w) = image.size();
    if rate > h || rate > w {
        return Err(FtwaError::DegenerateInput(format!(
            "rate {rate} exceeds image size {h}x{w}"
        )));
    }
    let pixels = resize_bilinear(image.pixels(), h / rate, w / rate);
    Ok(image.replace_pixels(pixels, ResolutionTag::SynthLr { rate }))
}

/// Bilinear resize to the network input size; the resolution tag is kept.
pub fn upsample_to_canonical(image: &ImageRecord, canonical: (u32, u32)) -> Result<ImageRecord> {
    let (h0, w0) = canonical;
    if h0 == 0 || w0 == 0 {
        return Err(FtwaError::Config(format!(
            "canonical size must be positive, got {h0}x{w0}"
        )));
    }
    let pixels = resize_bilinear(image.pixels(), h0, w0);
    Ok(image.replace_pixels(pixels, image.tag))
}
