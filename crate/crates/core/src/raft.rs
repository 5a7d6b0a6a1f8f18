//! Resolution-association feature transformation: a lightweight
//! distillation network mapping low-resolution feature maps into the
//! high-resolution feature space.
//!
//! Block wiring (per [`Raftb`]): `num_inner_steps` rounds of
//! `conv3x3 → leaky ReLU → channel split`, where the first half of each
//! split is kept as a distilled branch and the second half is refined by
//! the next round. The distilled branches and the last refined half are
//! concatenated, fused by a 1×1 convolution without activation, gated by a
//! pooled channel attention (`GAP → 1×1 → leaky ReLU → 1×1 → sigmoid`),
//! and added back to the block input.
//!
//! Module wiring (per [`Raft`]): `conv3x3` head into the inner width,
//! `num_blocks` blocks, concatenation of every block output, `1×1 + leaky
//! ReLU`, `conv3x3`, global residual from the head, and a 1×1
//! reconstruction back to the backbone width.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, StreamTag};
use crate::checkpoint;
use crate::error::{FtwaError, Result};
use crate::nn::{leaky_relu, sigmoid, Conv2d, ConvSpec, ParamBuilder, ParamStore};

/// Parameter namespace of the transformation module.
pub const RAFT_NAMESPACE: &str = "raft";

/// Splits a batched feature tensor into its first and second channel halves.
pub fn split_channels(xs: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = xs.dim(1)?;
    if c % 2 != 0 {
        return Err(FtwaError::shape(
            "channel split",
            "an even channel count",
            format!("{c} channels"),
        ));
    }
    Ok((xs.narrow(1, 0, c / 2)?, xs.narrow(1, c / 2, c / 2)?))
}

/// Even channel split of a feature map; concatenating the halves in order
/// gives back the input.
pub fn channel_split(x: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    let (a, b) = split_channels(&x.values)?;
    Ok((FeatureMap::new(a, x.tag)?, FeatureMap::new(b, x.tag)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftbConfig {
    pub channels: usize,
    pub num_inner_steps: usize,
    pub attention_reduction: usize,
}

impl RaftbConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            num_inner_steps: 3,
            attention_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(FtwaError::Config(format!(
                "block width must be even and at least 2, got {}",
                self.channels
            )));
        }
        if self.num_inner_steps == 0 || self.attention_reduction == 0 {
            return Err(FtwaError::Config(
                "inner steps and attention reduction must be positive".into(),
            ));
        }
        Ok(())
    }

    fn squeezed(&self) -> usize {
        (self.channels / self.attention_reduction).max(1)
    }
}

/// Distillation block.
#[derive(Debug, Clone)]
pub struct Raftb {
    config: RaftbConfig,
    steps: Vec<Conv2d>,
    fuse: Conv2d,
    squeeze: Conv2d,
    expand: Conv2d,
}

impl Raftb {
    pub fn new(config: RaftbConfig, pb: &ParamBuilder) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let steps = (0..config.num_inner_steps)
            .map(|i| {
                let c_in = if i == 0 { c } else { c / 2 };
                Conv2d::new(ConvSpec::new(c_in, c, 3), &pb.pp(format!("step{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let concat = (config.num_inner_steps + 1) * c / 2;
        Ok(Self {
            config,
            steps,
            fuse: Conv2d::new(ConvSpec::new(concat, c, 1), &pb.pp("fuse"))?,
            squeeze: Conv2d::new(ConvSpec::new(c, config.squeezed(), 1), &pb.pp("gate_squeeze"))?,
            expand: Conv2d::new(ConvSpec::new(config.squeezed(), c, 1), &pb.pp("gate_expand"))?,
        })
    }

    /// Features entering the gate (after the 1×1 fusion).
    fn distill(&self, xs: &Tensor) -> Result<Tensor> {
        let mut branches = Vec::with_capacity(self.steps.len() + 1);
        let mut refined = xs.clone();
        for conv in &self.steps {
            let h = leaky_relu(&conv.forward(&refined)?)?;
            let (distilled, rest) = split_channels(&h)?;
            branches.push(distilled);
            refined = rest;
        }
        branches.push(refined);
        self.fuse.forward(&Tensor::cat(&branches, 1)?)
    }

    /// Channel attention in `(0, 1)`, shaped `(N, C, 1, 1)`.
    fn gate(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = features.mean_keepdim(3)?.mean_keepdim(2)?;
        let h = leaky_relu(&self.squeeze.forward(&pooled)?)?;
        sigmoid(&self.expand.forward(&h)?)
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let c = xs.dim(1)?;
        if c != self.config.channels {
            return Err(FtwaError::shape(
                "RAFT block input",
                format!("{} channels", self.config.channels),
                format!("{c} channels"),
            ));
        }
        let features = self.distill(xs)?;
        let gated = features.broadcast_mul(&self.gate(&features)?)?;
        Ok((gated + xs)?)
    }

    pub fn config(&self) -> &RaftbConfig {
        &self.config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftConfig {
    /// Backbone feature width on both ends of the module.
    pub channels: usize,
    /// Width the distillation blocks run at.
    pub inner_channels: usize,
    pub num_blocks: usize,
    pub num_inner_steps: usize,
    pub attention_reduction: usize,
}

impl RaftConfig {
    pub fn new(channels: usize, inner_channels: usize) -> Self {
        Self {
            channels,
            inner_channels,
            num_blocks: 3,
            num_inner_steps: 3,
            attention_reduction: 4,
        }
    }

    /// Inner width sized so the module stays well under a tenth of the
    /// backbone it is attached to.
    pub fn for_backbone(channels: usize) -> Self {
        let inner = match channels {
            c if c >= 1024 => 64,
            c if c >= 128 => 16,
            c => c.max(2) + c % 2,
        };
        Self::new(channels, inner)
    }

    fn block(&self) -> RaftbConfig {
        RaftbConfig {
            channels: self.inner_channels,
            num_inner_steps: self.num_inner_steps,
            attention_reduction: self.attention_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.num_blocks == 0 {
            return Err(FtwaError::Config(
                "RAFT needs positive width and at least one block".into(),
            ));
        }
        self.block().validate()
    }
}

/// The transformation `T`.
#[derive(Debug, Clone)]
pub struct Raft {
    config: RaftConfig,
    head: Conv2d,
    blocks: Vec<Raftb>,
    fuse: Conv2d,
    body_tail: Conv2d,
    reconstruct: Conv2d,
}

impl Raft {
    /// Builds the module under `pb` (callers normally pass `root.pp("raft")`).
    pub fn new(config: RaftConfig, pb: &ParamBuilder) -> Result<Self> {
        config.validate()?;
        let (c, n) = (config.channels, config.inner_channels);
        let blocks = (0..config.num_blocks)
            .map(|i| Raftb::new(config.block(), &pb.pp(format!("block{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            head: Conv2d::new(ConvSpec::new(c, n, 3), &pb.pp("head"))?,
            blocks,
            fuse: Conv2d::new(ConvSpec::new(config.num_blocks * n, n, 1), &pb.pp("fuse"))?,
            body_tail: Conv2d::new(ConvSpec::new(n, n, 3), &pb.pp("body_tail"))?,
            reconstruct: Conv2d::new(ConvSpec::new(n, c, 1), &pb.pp("reconstruct"))?,
        })
    }

    pub fn config(&self) -> &RaftConfig {
        &self.config
    }

    /// Tensor-level transform of an `(N, C, H, W)` batch.
    pub fn transform(&self, xs: &Tensor) -> Result<Tensor> {
        let c = xs.dim(1)?;
        if xs.rank() != 4 || c != self.config.channels {
            return Err(FtwaError::shape(
                "RAFT input",
                format!("(N, {}, H, W)", self.config.channels),
                format!("{:?}", xs.dims()),
            ));
        }
        let head = self.head.forward(xs)?;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut h = head.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
            outputs.push(h.clone());
        }
        let fused = leaky_relu(&self.fuse.forward(&Tensor::cat(&outputs, 1)?)?)?;
        let body = self.body_tail.forward(&fused)?;
        self.reconstruct.forward(&(body + head)?)
    }

    /// `F'_HR = T(F)` for low-resolution features (real or synthetic).
    pub fn forward(&self, features: &FeatureMap) -> Result<FeatureMap> {
        if !matches!(features.tag, StreamTag::Lr | StreamTag::SynthLr) {
            return Err(FtwaError::Contract(format!(
                "RAFT transforms low-resolution features only, got {:?}",
                features.tag
            )));
        }
        FeatureMap::new(self.transform(&features.values)?, StreamTag::SynthHr)
    }

    /// Writes the module as a standalone feature-in/feature-out file.
    pub fn export(&self, store: &ParamStore, path: &Path) -> Result<()> {
        let prefix = format!("{RAFT_NAMESPACE}.");
        let tensors: Vec<(String, Tensor)> = store
            .all()
            .into_iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        let mut meta = HashMap::new();
        meta.insert("kind".to_string(), "raft".to_string());
        meta.insert("raft_config".to_string(), serde_json::to_string(&self.config)?);
        checkpoint::save_tensors(path, &tensors, meta)
    }

    /// Loads a file written by [`Raft::export`].
    pub fn import(path: &Path, dtype: DType, device: &Device) -> Result<(Self, ParamStore)> {
        let (tensors, meta) = checkpoint::load_tensors(path, device)?;
        if meta.get("kind").map(String::as_str) != Some("raft") {
            return Err(FtwaError::Checkpoint(format!(
                "{} is not a standalone RAFT export",
                path.display()
            )));
        }
        let config: RaftConfig = serde_json::from_str(
            meta.get("raft_config")
                .ok_or_else(|| FtwaError::Checkpoint("missing raft_config".into()))?,
        )?;
        let store = ParamStore::new(0, dtype, device.clone());
        let raft = Raft::new(config, &store.root().pp(RAFT_NAMESPACE))?;
        store.load(&tensors)?;
        Ok((raft, store))
    }
}

/// Mean absolute difference between a high-resolution target and the
/// transformed features. Zero iff the tensors are equal.
pub fn raft_loss(target: &Tensor, transformed: &Tensor) -> Result<Tensor> {
    if target.dims() != transformed.dims() {
        return Err(FtwaError::shape(
            "RAFT loss",
            format!("{:?}", target.dims()),
            format!("{:?}", transformed.dims()),
        ));
    }
    Ok((target - transformed)?.abs()?.mean_all()?)
}
