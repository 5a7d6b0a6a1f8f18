//! Two-stream backbone: stream-specific shallow encoders (stem + first
//! stage) feeding one shared deep re-identification encoder (remaining
//! stages).

use candle_core::{Tensor, D};
use candle_nn::{BatchNorm, ModuleT};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{downsample, records_to_tensor, upsample_to_canonical, ImageRecord, ResolutionTag};
use crate::error::{FtwaError, Result};
use crate::nn::{batch_norm, Conv2d, ConvSpec, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Bottleneck residual network with the 50-layer stage layout.
    PaperScale,
    /// Four basic residual blocks, small enough for CPU training.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub stem_channels: usize,
    /// Base width of each of the four stages.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub last_stage_stride: usize,
    /// `(height, width)` the encoders accept.
    pub input_size: (u32, u32),
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            stem_channels: 32,
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: vec![1, 1, 1, 1],
            last_stage_stride: 1,
            input_size: (64, 32),
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            variant: BackboneVariant::PaperScale,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            last_stage_stride: 1,
            input_size: (256, 128),
        }
    }

    fn expansion(&self) -> usize {
        match self.variant {
            BackboneVariant::Tiny => 1,
            BackboneVariant::PaperScale => 4,
        }
    }

    /// Channel count of the final feature map, which is also the ReID
    /// vector dimension after pooling.
    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[3] * self.expansion()
    }

    fn stage_stride(&self, stage: usize) -> usize {
        match stage {
            0 => 1,
            3 => self.last_stage_stride,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.blocks_per_stage.len() != 4 {
            return Err(FtwaError::Config(
                "backbone needs exactly four stages".into(),
            ));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(FtwaError::Config("every stage needs a block".into()));
        }
        if !matches!(self.last_stage_stride, 1 | 2) {
            return Err(FtwaError::Config(format!(
                "last stage stride must be 1 or 2, got {}",
                self.last_stage_stride
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` of the deep-encoder output for the configured input.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let conv = |n: usize, k: usize, s: usize| (n + 2 * (k / 2) - k) / s + 1;
        let (mut h, mut w) = (self.input_size.0 as usize, self.input_size.1 as usize);
        match self.variant {
            BackboneVariant::Tiny => {
                h = conv(h, 3, 2);
                w = conv(w, 3, 2);
            }
            BackboneVariant::PaperScale => {
                h = conv(conv(h, 7, 2), 3, 2);
                w = conv(conv(w, 7, 2), 3, 2);
            }
        }
        for stage in 0..4 {
            let s = self.stage_stride(stage);
            h = conv(h, 3, s);
            w = conv(w, 3, s);
        }
        (self.embedding_dim(), h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Hr,
    Lr,
}

/// Which of the four feature maps a tensor holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamTag {
    /// Real high-resolution input through the HR encoder.
    Hr,
    /// Real low-resolution input through the LR encoder.
    Lr,
    /// Down-sampled view of a high-resolution image through the LR encoder.
    SynthLr,
    /// Low-resolution features mapped to the high-resolution space.
    SynthHr,
}

/// Batched `(N, C, H, W)` feature tensor with its provenance.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub tag: StreamTag,
}

impl FeatureMap {
    pub fn new(values: Tensor, tag: StreamTag) -> Result<Self> {
        if values.rank() != 4 {
            return Err(FtwaError::shape(
                "feature map",
                "rank 4 (N, C, H, W)",
                format!("{:?}", values.dims()),
            ));
        }
        Ok(Self { values, tag })
    }

    /// `(C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.values.dims();
        (d[1], d[2], d[3])
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }
}

#[derive(Debug, Clone)]
struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
enum Block {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        shortcut: Option<Shortcut>,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        conv3: Conv2d,
        bn3: BatchNorm,
        shortcut: Option<Shortcut>,
    },
}

fn shortcut(c_in: usize, c_out: usize, stride: usize, pb: &ParamBuilder) -> Result<Option<Shortcut>> {
    if stride == 1 && c_in == c_out {
        return Ok(None);
    }
    Ok(Some(Shortcut {
        conv: Conv2d::new(ConvSpec::new(c_in, c_out, 1).stride(stride).no_bias(), &pb.pp("conv"))?,
        bn: batch_norm(c_out, 1.0, &pb.pp("bn"))?,
    }))
}

impl Block {
    fn basic(c_in: usize, c_out: usize, stride: usize, pb: &ParamBuilder) -> Result<Self> {
        Ok(Block::Basic {
            conv1: Conv2d::new(ConvSpec::new(c_in, c_out, 3).stride(stride).no_bias(), &pb.pp("conv1"))?,
            bn1: batch_norm(c_out, 1.0, &pb.pp("bn1"))?,
            conv2: Conv2d::new(ConvSpec::new(c_out, c_out, 3).no_bias(), &pb.pp("conv2"))?,
            // zero-init residual scale so every block starts as identity
            bn2: batch_norm(c_out, 0.0, &pb.pp("bn2"))?,
            shortcut: shortcut(c_in, c_out, stride, &pb.pp("shortcut"))?,
        })
    }

    fn bottleneck(
        c_in: usize,
        width: usize,
        stride: usize,
        expansion: usize,
        pb: &ParamBuilder,
    ) -> Result<Self> {
        let c_out = width * expansion;
        Ok(Block::Bottleneck {
            conv1: Conv2d::new(ConvSpec::new(c_in, width, 1).no_bias(), &pb.pp("conv1"))?,
            bn1: batch_norm(width, 1.0, &pb.pp("bn1"))?,
            conv2: Conv2d::new(ConvSpec::new(width, width, 3).stride(stride).no_bias(), &pb.pp("conv2"))?,
            bn2: batch_norm(width, 1.0, &pb.pp("bn2"))?,
            conv3: Conv2d::new(ConvSpec::new(width, c_out, 1).no_bias(), &pb.pp("conv3"))?,
            bn3: batch_norm(c_out, 0.0, &pb.pp("bn3"))?,
            shortcut: shortcut(c_in, c_out, stride, &pb.pp("shortcut"))?,
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (ys, shortcut) = match self {
            Block::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let ys = bn1.forward_t(&conv1.forward(xs)?, train)?.relu()?;
                (bn2.forward_t(&conv2.forward(&ys)?, train)?, shortcut)
            }
            Block::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                shortcut,
            } => {
                let ys = bn1.forward_t(&conv1.forward(xs)?, train)?.relu()?;
                let ys = bn2.forward_t(&conv2.forward(&ys)?, train)?.relu()?;
                (bn3.forward_t(&conv3.forward(&ys)?, train)?, shortcut)
            }
        };
        let identity = match shortcut {
            Some(s) => s.bn.forward_t(&s.conv.forward(xs)?, train)?,
            None => xs.clone(),
        };
        Ok((ys + identity)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Block>,
}

impl Stage {
    fn new(config: &BackboneConfig, stage: usize, c_in: usize, pb: &ParamBuilder) -> Result<(Self, usize)> {
        let width = config.stage_channels[stage];
        let stride = config.stage_stride(stage);
        let mut blocks = Vec::new();
        let mut c = c_in;
        for i in 0..config.blocks_per_stage[stage] {
            let s = if i == 0 { stride } else { 1 };
            let block = match config.variant {
                BackboneVariant::Tiny => Block::basic(c, width, s, &pb.pp(i))?,
                BackboneVariant::PaperScale => {
                    Block::bottleneck(c, width, s, config.expansion(), &pb.pp(i))?
                }
            };
            c = width * config.expansion();
            blocks.push(block);
        }
        Ok((Self { blocks }, c))
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.blocks
            .iter()
            .try_fold(xs.clone(), |h, b| b.forward(&h, train))
    }
}

/// Stem convolution followed by the first residual stage.
#[derive(Debug, Clone)]
struct ShallowEncoder {
    stem: Conv2d,
    stem_bn: BatchNorm,
    max_pool: bool,
    stage: Stage,
}

impl ShallowEncoder {
    fn new(config: &BackboneConfig, pb: &ParamBuilder) -> Result<(Self, usize)> {
        let (kernel, max_pool) = match config.variant {
            BackboneVariant::Tiny => (3, false),
            BackboneVariant::PaperScale => (7, true),
        };
        let stem = Conv2d::new(
            ConvSpec::new(3, config.stem_channels, kernel).stride(2).no_bias(),
            &pb.pp("stem"),
        )?;
        let stem_bn = batch_norm(config.stem_channels, 1.0, &pb.pp("stem_bn"))?;
        let (stage, c) = Stage::new(config, 0, config.stem_channels, &pb.pp("stage1"))?;
        Ok((
            Self {
                stem,
                stem_bn,
                max_pool,
                stage,
            },
            c,
        ))
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem_bn.forward_t(&self.stem.forward(xs)?, train)?.relu()?;
        if self.max_pool {
            // post-ReLU activations are non-negative, so zero padding acts as -inf
            h = h
                .pad_with_zeros(D::Minus1, 1, 1)?
                .pad_with_zeros(D::Minus2, 1, 1)?
                .max_pool2d_with_stride(3, 2)?;
        }
        self.stage.forward(&h, train)
    }
}

/// Shared deep encoder: stages two to four.
#[derive(Debug, Clone)]
struct ReidEncoder {
    stages: Vec<Stage>,
}

impl ReidEncoder {
    fn new(config: &BackboneConfig, c_in: usize, pb: &ParamBuilder) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c = c_in;
        for stage in 1..4 {
            let (s, c_out) = Stage::new(config, stage, c, &pb.pp(format!("stage{}", stage + 1)))?;
            stages.push(s);
            c = c_out;
        }
        Ok(Self { stages })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.stages
            .iter()
            .try_fold(xs.clone(), |h, s| s.forward(&h, train))
    }
}

/// Parameter namespaces of the three encoders.
pub const HR_ENCODER: &str = "e_h";
pub const LR_ENCODER: &str = "e_l";
pub const REID_ENCODER: &str = "e_id";

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    hr: ShallowEncoder,
    lr: Option<ShallowEncoder>,
    reid: ReidEncoder,
}

impl Backbone {
    /// Builds the encoders under `e_h`, `e_l` (only when `dual_stream`) and
    /// `e_id`.
    pub fn new(config: &BackboneConfig, dual_stream: bool, pb: &ParamBuilder) -> Result<Self> {
        config.validate()?;
        let (hr, c) = ShallowEncoder::new(config, &pb.pp(HR_ENCODER))?;
        let lr = if dual_stream {
            Some(ShallowEncoder::new(config, &pb.pp(LR_ENCODER))?.0)
        } else {
            None
        };
        let reid = ReidEncoder::new(config, c, &pb.pp(REID_ENCODER))?;
        Ok(Self {
            config: config.clone(),
            hr,
            lr,
            reid,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_dual_stream(&self) -> bool {
        self.lr.is_some()
    }

    /// Stream-specific shallow features of an image batch.
    pub fn shallow(&self, xs: &Tensor, stream: Stream, train: bool) -> Result<Tensor> {
        match (stream, &self.lr) {
            (Stream::Hr, _) => self.hr.forward(xs, train),
            (Stream::Lr, Some(lr)) => lr.forward(xs, train),
            (Stream::Lr, None) => Err(FtwaError::Contract(
                "single-stream backbone has no low-resolution encoder".into(),
            )),
        }
    }

    pub fn deep(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.reid.forward(xs, train)
    }

    fn check_input(&self, xs: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        let dims = xs.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != h as usize || dims[3] != w as usize {
            return Err(FtwaError::shape(
                "backbone input",
                format!("(N, 3, {h}, {w})"),
                format!("{dims:?}"),
            ));
        }
        Ok(())
    }

    /// `E_ID(E_stream(x))` for an `(N, 3, H, W)` batch.
    pub fn encode_tensor(&self, xs: &Tensor, stream: Stream, train: bool) -> Result<Tensor> {
        self.check_input(xs)?;
        self.deep(&self.shallow(xs, stream, train)?, train)
    }

    /// Inference-mode encoding of one canonical-size image.
    pub fn encode(&self, image: &ImageRecord, stream: Stream) -> Result<FeatureMap> {
        let tag = match (stream, image.tag) {
            (Stream::Hr, _) => StreamTag::Hr,
            (Stream::Lr, ResolutionTag::RealLr) => StreamTag::Lr,
            (Stream::Lr, ResolutionTag::SynthLr { .. }) => StreamTag::SynthLr,
            (Stream::Lr, ResolutionTag::RealHr) => {
                return Err(FtwaError::Contract(
                    "high-resolution image sent to the low-resolution stream without degradation"
                        .into(),
                ))
            }
        };
        let dtype = self.hr.stem.dtype();
        let device = self.hr.stem.weight().device().clone();
        let xs = records_to_tensor(&[image], self.config.input_size, dtype, &device)?;
        FeatureMap::new(self.encode_tensor(&xs, stream, false)?, tag)
    }

    /// `(E_ID(E_H(I)), E_ID(E_L(I')))` where `I'` is `I` degraded at a
    /// rate drawn from `rates` and brought back to canonical size.
    pub fn forward_pair<R: Rng>(
        &self,
        hr_image: &ImageRecord,
        rates: &[u32],
        rng: &mut R,
    ) -> Result<(FeatureMap, FeatureMap)> {
        if hr_image.tag != ResolutionTag::RealHr {
            return Err(FtwaError::Contract(format!(
                "forward_pair expects a high-resolution record, got {:?}",
                hr_image.tag
            )));
        }
        if rates.is_empty() {
            return Err(FtwaError::Config("empty rate set".into()));
        }
        let canonical = self.config.input_size;
        let hr = upsample_to_canonical(hr_image, canonical)?;
        let rate = rates[rng.random_range(0..rates.len())];
        let view = upsample_to_canonical(&downsample(hr_image, rate)?, canonical)?;
        Ok((self.encode(&hr, Stream::Hr)?, self.encode(&view, Stream::Lr)?))
    }
}
