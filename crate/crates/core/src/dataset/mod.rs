//! Image records, resolution degradation, MLR split construction and
//! identity-balanced batch sampling.

mod ingest;
mod resample;
mod sampler;
mod split;
mod synthetic;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use image::Rgb32FImage;
use serde::{Deserialize, Serialize};

pub use ingest::{ingest_directory, parse_file_name, IngestReport};
pub use resample::{downsample, resize_bilinear, upsample_to_canonical};
pub use sampler::{pk_sample, PkSampler, TrainingBatch};
pub use split::{build_mlr_split, MlrConfig, MlrSplit, SplitManifest, SplitSource};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

use crate::error::{FtwaError, Result};

/// Rates an MLR protocol draws from by default.
pub const DEFAULT_RATES: [u32; 3] = [2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResolutionTag {
    RealHr,
    RealLr,
    SynthLr { rate: u32 },
}

impl ResolutionTag {
    pub fn is_low_resolution(&self) -> bool {
        !matches!(self, ResolutionTag::RealHr)
    }

    pub fn rate(&self) -> Option<u32> {
        match self {
            ResolutionTag::SynthLr { rate } => Some(*rate),
            _ => None,
        }
    }
}

/// One image with identity, camera and resolution provenance.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pixels: Rgb32FImage,
    pub person_id: u32,
    pub camera_id: u32,
    pub tag: ResolutionTag,
    pub source_path: Option<PathBuf>,
}

impl ImageRecord {
    pub fn new(
        pixels: Rgb32FImage,
        person_id: u32,
        camera_id: u32,
        tag: ResolutionTag,
    ) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(FtwaError::DegenerateInput(format!(
                "image of size {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        if let Some(bad) = pixels.as_raw().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FtwaError::DegenerateInput(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        if let ResolutionTag::SynthLr { rate } = tag {
            if rate < 2 {
                return Err(FtwaError::DegenerateInput(format!(
                    "synthetic low-resolution rate {rate} < 2"
                )));
            }
        }
        Ok(Self {
            pixels,
            person_id,
            camera_id,
            tag,
            source_path: None,
        })
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = Some(path.into());
        self
    }

    pub fn pixels(&self) -> &Rgb32FImage {
        &self.pixels
    }

    /// `(height, width)`.
    pub fn size(&self) -> (u32, u32) {
        (self.pixels.height(), self.pixels.width())
    }

    pub(crate) fn replace_pixels(&self, pixels: Rgb32FImage, tag: ResolutionTag) -> Self {
        Self {
            pixels,
            person_id: self.person_id,
            camera_id: self.camera_id,
            tag,
            source_path: self.source_path.clone(),
        }
    }
}

/// Per-channel normalization applied when images become network input.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Stacks records into an `(N, 3, H, W)` tensor. Every record must already
/// be at `(height, width)`.
pub fn records_to_tensor(
    records: &[&ImageRecord],
    canonical: (u32, u32),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (h, w) = canonical;
    let plane = (h * w) as usize;
    let mut data = vec![0f32; records.len() * 3 * plane];
    for (i, rec) in records.iter().enumerate() {
        if rec.size() != canonical {
            return Err(FtwaError::shape(
                "network input",
                format!("{h}x{w}"),
                format!("{}x{}", rec.size().0, rec.size().1),
            ));
        }
        let base = i * 3 * plane;
        for (idx, px) in rec.pixels.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + idx] = px.0[c];
            }
        }
    }
    let t = Tensor::from_vec(data, (records.len(), 3, h as usize, w as usize), device)?;
    Ok(t.affine(1.0 / PIXEL_STD, -PIXEL_MEAN / PIXEL_STD)?
        .to_dtype(dtype)?)
}
