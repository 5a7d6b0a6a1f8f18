//! Variant assembly: backbone, transformation module and heads under one
//! parameter store, the per-batch training objective, and model files.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, Stream};
use crate::checkpoint;
use crate::dataset::{records_to_tensor, ImageRecord, TrainingBatch};
use crate::error::{FtwaError, Result};
use crate::nn::ParamStore;
use crate::raft::{raft_loss, Raft, RaftConfig, RAFT_NAMESPACE};
use crate::swa::{
    cls_loss, gap, scalar, swa_cls_loss, swa_triplet_loss, total_loss, triplet_loss, LossWeights,
    SwaHeads, TripletMining, WeightedPair, SWA_NAMESPACE,
};

/// Rows of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single-stream backbone, plain classification and triplet losses.
    Baseline,
    /// Two-stream backbone, plain losses.
    FtwaB,
    /// Two streams plus the transformation module, unweighted losses.
    FtwaR,
    /// Full model with quality-weighted losses.
    Ftwa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::FtwaB, Variant::FtwaR, Variant::Ftwa];

    pub fn dual_stream(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_raft(self) -> bool {
        matches!(self, Variant::FtwaR | Variant::Ftwa)
    }

    pub fn uses_evaluators(self) -> bool {
        self == Variant::Ftwa
    }

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::FtwaB => "FTWA_B",
            Variant::FtwaR => "FTWA_R",
            Variant::Ftwa => "FTWA",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FtwaB => "ftwa_b",
            Variant::FtwaR => "ftwa_r",
            Variant::Ftwa => "ftwa",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = FtwaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key().eq_ignore_ascii_case(s) || v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                FtwaError::Config(format!(
                    "unknown variant '{s}' (expected baseline, ftwa_b, ftwa_r or ftwa)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub raft: RaftConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, backbone: BackboneConfig, num_classes: usize) -> Self {
        let raft = RaftConfig::for_backbone(backbone.embedding_dim());
        Self {
            variant,
            backbone,
            raft,
            num_classes,
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Scalar summaries of one training step.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Tensor,
    pub cls: f64,
    pub tri: f64,
    pub raft: f64,
    /// Batch-mean quality weights `(w_HR, w'_HR, w_LR, w'_LR)`; all 1 for
    /// variants without evaluators.
    pub weights: [f64; 4],
    /// A triplet term had no valid triplet.
    pub degenerate_triplets: bool,
}

/// Feature maps of one batch.
struct BatchFeatures {
    hr: Tensor,
    synth_lr: Option<Tensor>,
    lr: Tensor,
}

/// Descriptor ingredients for a batch of images.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// `(N, D)` native-resolution vectors.
    pub primary: Tensor,
    /// `(N, D)` counterpart-resolution vectors.
    pub auxiliary: Option<Tensor>,
    /// `(N,)` quality weights of the primary and auxiliary vectors.
    pub weights: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    raft: Option<Raft>,
    heads: SwaHeads,
}

fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 0)?)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let variant = config.variant;
        let backbone = Backbone::new(&config.backbone, variant.dual_stream(), &root)?;
        let raft = if variant.uses_raft() {
            if config.raft.channels != config.backbone.embedding_dim() {
                return Err(FtwaError::Config(format!(
                    "RAFT width {} does not match backbone width {}",
                    config.raft.channels,
                    config.backbone.embedding_dim()
                )));
            }
            Some(Raft::new(config.raft, &root.pp(RAFT_NAMESPACE))?)
        } else {
            None
        };
        let heads = SwaHeads::new(
            config.backbone.embedding_dim(),
            config.num_classes,
            variant.dual_stream(),
            variant.uses_evaluators(),
            &root.pp(SWA_NAMESPACE),
        )?;
        Ok(Self {
            config,
            store,
            backbone,
            raft,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn raft(&self) -> Option<&Raft> {
        self.raft.as_ref()
    }

    pub fn heads(&self) -> &SwaHeads {
        &self.heads
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn to_tensor(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        records_to_tensor(records, self.config.backbone.input_size, self.dtype(), self.device())
    }

    fn encode_batch(&self, batch: &TrainingBatch) -> Result<BatchFeatures> {
        fn refs(v: &[ImageRecord]) -> Vec<&ImageRecord> {
            v.iter().collect()
        }
        let hr = self.to_tensor(&refs(&batch.hr_images))?;
        let lr = self.to_tensor(&refs(&batch.lr_images))?;
        let (n_hr, n_lr) = (batch.hr_images.len(), batch.lr_images.len());
        let bb = &self.backbone;
        if !self.variant().dual_stream() {
            let shallow = bb.shallow(&concat(&[&hr, &lr])?, Stream::Hr, true)?;
            let deep = bb.deep(&shallow, true)?;
            return Ok(BatchFeatures {
                hr: deep.narrow(0, 0, n_hr)?,
                synth_lr: None,
                lr: deep.narrow(0, n_hr, n_lr)?,
            });
        }
        let synth = self.to_tensor(&refs(&batch.synth_lr))?;
        let s_hr = bb.shallow(&hr, Stream::Hr, true)?;
        let s_lr = bb.shallow(&concat(&[&synth, &lr])?, Stream::Lr, true)?;
        let deep = bb.deep(&concat(&[&s_hr, &s_lr])?, true)?;
        Ok(BatchFeatures {
            hr: deep.narrow(0, 0, n_hr)?,
            synth_lr: Some(deep.narrow(0, n_hr, n_hr)?),
            lr: deep.narrow(0, 2 * n_hr, n_lr)?,
        })
    }

    /// Training objective of the model's variant on one batch.
    pub fn losses(
        &self,
        batch: &TrainingBatch,
        weights: &LossWeights,
        mining: TripletMining,
        step: usize,
    ) -> Result<StepLosses> {
        if batch.hr_images.is_empty() || batch.lr_images.is_empty() {
            return Err(FtwaError::Contract(
                "training batches need both high- and low-resolution images".into(),
            ));
        }
        if batch.synth_lr.len() != batch.hr_images.len() {
            return Err(FtwaError::Contract(
                "every high-resolution image needs one synthetic low-resolution view".into(),
            ));
        }
        let feats = self.encode_batch(batch)?;
        let (hr_y, lr_y) = (&batch.hr_labels, &batch.lr_labels);
        let v_hr = gap(&feats.hr)?;
        let v_lr = gap(&feats.lr)?;
        let zero = Tensor::zeros((), self.dtype(), self.device())?;
        let margin = weights.margin;

        let (cls, tri, raft, w, degenerate) = match self.variant() {
            Variant::Baseline => {
                let v = concat(&[&v_hr, &v_lr])?;
                let y: Vec<usize> = hr_y.iter().chain(lr_y).copied().collect();
                let cls = cls_loss(&self.heads.classify(&v, Stream::Hr)?, &y)?.mean_all()?;
                let tri = triplet_loss(&v, &y, margin, mining)?;
                (cls, tri.loss, zero, [1.0; 4], tri.degenerate)
            }
            Variant::FtwaB => {
                let f_synth = feats.synth_lr.as_ref().expect("dual stream");
                let v_s = gap(f_synth)?;
                let l_hr = cls_loss(&self.heads.classify(&v_hr, Stream::Hr)?, hr_y)?;
                let l_s = cls_loss(&self.heads.classify(&v_s, Stream::Lr)?, hr_y)?;
                let l_lr = cls_loss(&self.heads.classify(&v_lr, Stream::Lr)?, lr_y)?;
                let cls = (((l_hr + l_s)? * 0.5)?.mean_all()? + l_lr.mean_all()?)?;
                let v = concat(&[&v_hr, &v_lr, &v_s])?;
                let y: Vec<usize> = hr_y.iter().chain(lr_y).chain(hr_y).copied().collect();
                let tri = triplet_loss(&v, &y, margin, mining)?;
                (cls, tri.loss, zero, [1.0; 4], tri.degenerate)
            }
            Variant::FtwaR | Variant::Ftwa => {
                let raft = self.raft.as_ref().expect("variant uses RAFT");
                let f_synth = feats.synth_lr.as_ref().expect("dual stream");
                let n_hr = batch.hr_images.len();
                let transformed = raft.transform(&concat(&[f_synth, &feats.lr])?)?;
                let t_synth = transformed.narrow(0, 0, n_hr)?;
                let f_hr_fake = transformed.narrow(0, n_hr, batch.lr_images.len())?;
                let l_raft = raft_loss(&feats.hr.detach(), &t_synth)?;

                let v_s = gap(f_synth)?;
                let v_fake = gap(&f_hr_fake)?;
                let l_hr = cls_loss(&self.heads.classify(&v_hr, Stream::Hr)?, hr_y)?;
                let l_fake = cls_loss(&self.heads.classify(&v_fake, Stream::Hr)?, lr_y)?;
                let l_lr = cls_loss(&self.heads.classify(&v_lr, Stream::Lr)?, lr_y)?;
                let l_s = cls_loss(&self.heads.classify(&v_s, Stream::Lr)?, hr_y)?;

                let (w_hr, w_fake, w_lr, w_s) = if self.variant() == Variant::Ftwa {
                    (
                        self.heads.evaluate(&v_hr, Stream::Hr)?,
                        self.heads.evaluate(&v_fake, Stream::Hr)?,
                        self.heads.evaluate(&v_lr, Stream::Lr)?,
                        self.heads.evaluate(&v_s, Stream::Lr)?,
                    )
                } else {
                    (l_hr.ones_like()?, l_fake.ones_like()?, l_lr.ones_like()?, l_s.ones_like()?)
                };
                let cls = swa_cls_loss(
                    &WeightedPair { w_real: &w_hr, l_real: &l_hr, w_synth: &w_s, l_synth: &l_s },
                    &WeightedPair { w_real: &w_lr, l_real: &l_lr, w_synth: &w_fake, l_synth: &l_fake },
                )?;

                let y_hr: Vec<usize> = hr_y.iter().chain(lr_y).copied().collect();
                let y_lr: Vec<usize> = lr_y.iter().chain(hr_y).copied().collect();
                let tri_hr = triplet_loss(&concat(&[&v_hr, &v_fake])?, &y_hr, margin, mining)?;
                let tri_lr = triplet_loss(&concat(&[&v_lr, &v_s])?, &y_lr, margin, mining)?;
                let (m_hr, m_fake, m_lr, m_s) =
                    (w_hr.mean_all()?, w_fake.mean_all()?, w_lr.mean_all()?, w_s.mean_all()?);
                let tri = swa_triplet_loss(&m_hr, &m_fake, &m_lr, &m_s, &tri_hr.loss, &tri_lr.loss)?;
                let w = [
                    scalar(&m_hr)?,
                    scalar(&m_fake)?,
                    scalar(&m_lr)?,
                    scalar(&m_s)?,
                ];
                (cls, tri, l_raft, w, tri_hr.degenerate || tri_lr.degenerate)
            }
        };
        let total = total_loss(&cls, &tri, &raft, weights, step)?;
        Ok(StepLosses {
            total,
            cls: scalar(&cls)?,
            tri: scalar(&tri)?,
            raft: scalar(&raft)?,
            weights: w,
            degenerate_triplets: degenerate,
        })
    }

    /// Inference features `(N, C, H, W)` of canonical-size images.
    pub fn features(&self, xs: &Tensor, stream: Stream) -> Result<Tensor> {
        let stream = if self.variant().dual_stream() { stream } else { Stream::Hr };
        self.backbone.encode_tensor(xs, stream, false)
    }

    /// Low-resolution query path: `v_LR` with `v'_HR = gap(T(F_LR))` as
    /// auxiliary when the variant has the transformation module.
    pub fn embed_queries(&self, lr: &Tensor) -> Result<Embedding> {
        let f_lr = self.features(lr, Stream::Lr)?;
        let primary = gap(&f_lr)?;
        let Some(raft) = &self.raft else {
            return Ok(Embedding { primary, auxiliary: None, weights: None });
        };
        let aux = gap(&raft.transform(&f_lr)?)?;
        let weights = if self.heads.has_evaluators() {
            Some((
                self.heads.evaluate(&primary, Stream::Lr)?,
                self.heads.evaluate(&aux, Stream::Hr)?,
            ))
        } else {
            None
        };
        Ok(Embedding { primary, auxiliary: Some(aux), weights })
    }

    /// High-resolution gallery path: `v_HR` with the low-resolution stream
    /// vector of `views` (a degraded copy of each image) as auxiliary when
    /// the variant has the transformation module.
    pub fn embed_gallery(&self, hr: &Tensor, views: &Tensor) -> Result<Embedding> {
        let primary = gap(&self.features(hr, Stream::Hr)?)?;
        if self.raft.is_none() {
            return Ok(Embedding { primary, auxiliary: None, weights: None });
        }
        let aux = gap(&self.features(views, Stream::Lr)?)?;
        let weights = if self.heads.has_evaluators() {
            Some((
                self.heads.evaluate(&primary, Stream::Hr)?,
                self.heads.evaluate(&aux, Stream::Lr)?,
            ))
        } else {
            None
        };
        Ok(Embedding { primary, auxiliary: Some(aux), weights })
    }

    /// Trainable scalars per namespace prefix (`e_h`, `raft`, ...).
    pub fn param_count(&self, namespace: Option<&str>) -> usize {
        self.store.param_count(namespace)
    }

    pub fn config_hash(&self) -> Result<String> {
        config_hash(&self.config)
    }

    /// Writes every tensor with the model config as metadata.
    pub fn save(&self, path: &Path, extra: HashMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .store
            .all()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        let mut meta = extra;
        meta.insert("kind".into(), "ftwa_model".into());
        meta.insert("variant".into(), self.variant().key().into());
        meta.insert("model_config".into(), serde_json::to_string(&self.config)?);
        meta.insert("config_hash".into(), self.config_hash()?);
        checkpoint::save_tensors(path, &tensors, meta)
    }

    /// Rebuilds a model from a file written by [`Model::save`].
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, HashMap<String, String>)> {
        let (tensors, meta) = checkpoint::load_tensors(path, device)?;
        if meta.get("kind").map(String::as_str) != Some("ftwa_model") {
            return Err(FtwaError::Checkpoint(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let config: ModelConfig = serde_json::from_str(
            meta.get("model_config")
                .ok_or_else(|| FtwaError::Checkpoint("missing model_config".into()))?,
        )?;
        let model = Model::new(config, 0, dtype, device)?;
        if meta.get("config_hash") != Some(&model.config_hash()?) {
            return Err(FtwaError::Checkpoint(format!(
                "{}: config hash does not match its stored config",
                path.display()
            )));
        }
        model.store.load(&tensors)?;
        Ok((model, meta))
    }
}
