//! Optimization loop, learning-rate schedule, presets, metrics and the
//! ablation sweep.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::dataset::{pk_sample, ImageRecord, MlrSplit, DEFAULT_RATES};
use crate::error::{FtwaError, Result};
use crate::eval::{evaluate_model, EvalOptions};
use crate::model::{config_hash, Model, ModelConfig, Variant};
use crate::nn::{Adam, AdamConfig};
use crate::swa::{LossWeights, TripletMining};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub mining: TripletMining,
    pub backbone: BackboneConfig,
    pub rates: Vec<u32>,
    /// Single-threaded kernels for reproducible runs.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full recipe: 120 epochs, batch 64, step decay at 40 and 70.
    pub fn paper() -> Self {
        Self {
            variant: Variant::Ftwa,
            epochs: 120,
            p: 16,
            k: 4,
            base_lr: 7e-4,
            decay_epochs: vec![40, 70],
            decay_factor: 0.2,
            warmup_epochs: 10,
            seed: 0,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            mining: TripletMining::BatchAll,
            backbone: BackboneConfig::paper_scale(),
            rates: DEFAULT_RATES.to_vec(),
            deterministic: false,
        }
    }

    /// CPU-sized recipe on the small backbone at 64×32. Trains from scratch,
    /// so the base rate is ten times the paper's.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            base_lr: 7e-3,
            p: 4,
            k: 4,
            decay_epochs: vec![15, 22],
            warmup_epochs: 3,
            backbone: BackboneConfig::tiny(),
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(FtwaError::Config(format!(
                "unknown preset '{other}' (expected paper or desk)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FtwaError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FtwaError::Config(e.to_string()))
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FtwaError::Config("epochs must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FtwaError::Config(format!(
                "decay epochs must be strictly increasing, got {:?}",
                self.decay_epochs
            )));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(FtwaError::Config(format!(
                "decay epochs {:?} must lie below the epoch count {}",
                self.decay_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(FtwaError::Config("learning rate and decay factor must be positive".into()));
        }
        if self.rates.is_empty() || self.rates.iter().any(|&r| r < 2) {
            return Err(FtwaError::Config(format!("invalid rate set {:?}", self.rates)));
        }
        self.loss.validate()?;
        self.backbone.validate()
    }

    /// Learning rate of `epoch`: linear warmup from a tenth of the base
    /// rate, then one decay factor per decay epoch reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let start = self.base_lr / 10.0;
            return start + (self.base_lr - start) * epoch as f64 / self.warmup_epochs as f64;
        }
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// One optimizer step in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub tri: f64,
    pub raft: f64,
    pub w_hr: f64,
    pub w_hr_synth: f64,
    pub w_lr: f64,
    pub w_lr_synth: f64,
}

const METRICS_HEADER: &str = "epoch,step,lr,total,cls,tri,raft,w_hr,w_hr_synth,w_lr,w_lr_synth";

impl MetricsRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.epoch,
            self.step,
            self.lr,
            self.total,
            self.cls,
            self.tri,
            self.raft,
            self.w_hr,
            self.w_hr_synth,
            self.w_lr,
            self.w_lr_synth
        )
    }
}

/// Writes the metrics history as CSV with fixed float formatting.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| FtwaError::io(path, e))
}

/// Mean total loss of each epoch.
pub fn epoch_means(rows: &[MetricsRow]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricsRow>,
    pub checkpoint: Option<PathBuf>,
}

/// Where a run writes its files.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Print a one-line summary per epoch.
    pub progress: bool,
}

impl RunOutput {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.safetensors")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

fn checkpoint_metadata(config: &TrainConfig, step: usize) -> Result<HashMap<String, String>> {
    Ok(HashMap::from([
        ("train_config".to_string(), serde_json::to_string(config)?),
        ("train_config_hash".to_string(), config.hash()?),
        ("step".to_string(), step.to_string()),
    ]))
}

/// Trains `config.variant` on `train`.
///
/// With `output`, the checkpoint and metrics CSV are written there. A
/// non-finite loss or gradient stops the run with a divergence error after
/// saving the parameters of the last finite step.
pub fn train(config: &TrainConfig, train: &[ImageRecord], output: Option<&RunOutput>) -> Result<TrainOutcome> {
    config.validate()?;
    if config.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let canonical = config.backbone.input_size;
    let mut sampler = pk_sample(train, config.p, config.k, &config.rates, canonical, config.seed)?;
    let model_config = ModelConfig::new(config.variant, config.backbone.clone(), sampler.num_classes());
    let model = Model::new(model_config, config.seed, DType::F32, &Device::Cpu)?;
    let mut optimizer = Adam::new(model.store().trainable(), config.optimizer)?;
    let per_epoch = sampler.batches_per_epoch();
    let mut history = Vec::with_capacity(per_epoch * config.epochs);

    let save = |step: usize| -> Result<Option<PathBuf>> {
        let Some(out) = output else { return Ok(None) };
        let path = out.checkpoint_path();
        model.save(&path, checkpoint_metadata(config, step)?)?;
        Ok(Some(path))
    };
    let flush = |history: &[MetricsRow]| -> Result<()> {
        match output {
            Some(out) => write_metrics(&out.metrics_path(), history),
            None => Ok(()),
        }
    };

    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        for _ in 0..per_epoch {
            let batch = sampler.next_batch()?;
            let attempt = model
                .losses(&batch, &config.loss, config.mining, step)
                .and_then(|l| {
                    let grads = l.total.backward()?;
                    optimizer.step(&grads, lr)?;
                    Ok(l)
                });
            let losses = match attempt {
                Ok(l) => l,
                Err(e @ FtwaError::Divergence { .. }) => {
                    save(step)?;
                    flush(&history)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let [w_hr, w_hr_synth, w_lr, w_lr_synth] = losses.weights;
            let total = crate::swa::scalar(&losses.total)?;
            history.push(MetricsRow {
                epoch,
                step,
                lr,
                total,
                cls: losses.cls,
                tri: losses.tri,
                raft: losses.raft,
                w_hr,
                w_hr_synth,
                w_lr,
                w_lr_synth,
            });
            step += 1;
        }
        if output.is_some_and(|o| o.progress) {
            let recent = &history[history.len() - per_epoch..];
            let mean = recent.iter().map(|r| r.total).sum::<f64>() / per_epoch as f64;
            eprintln!("epoch {:>3}/{} lr {lr:.2e} loss {mean:.4}", epoch + 1, config.epochs);
            let _ = std::io::stderr().flush();
        }
    }
    let checkpoint = save(step)?;
    flush(&history)?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
    })
}

/// One variant's scores across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub rank1: Vec<f64>,
    pub rank5: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn rank1_mean(&self) -> f64 {
        mean_std(&self.rank1).0
    }

    pub fn rank5_mean(&self) -> f64 {
        mean_std(&self.rank5).0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn cell(v: &[f64]) -> String {
        let (m, s) = mean_std(v);
        if v.len() > 1 {
            format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)
        } else {
            format!("{:.1}", 100.0 * m)
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | Rank-1 (%) | Rank-5 (%) |\n|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} |\n",
                r.variant.label(),
                Self::cell(&r.rank1),
                Self::cell(&r.rank5)
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,rank1,rank5\n");
        for r in &self.rows {
            for ((seed, r1), r5) in r.seeds.iter().zip(&r.rank1).zip(&r.rank5) {
                s.push_str(&format!("{},{seed},{r1:.6},{r5:.6}\n", r.variant.label()));
            }
        }
        s
    }
}

/// Trains and scores every variant for every seed on one split.
///
/// `on_result` is called after each run with (variant, seed, rank-1).
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    split: &MlrSplit,
    eval: &EvalOptions,
    mut on_result: impl FnMut(Variant, u64, f64),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut row = AblationRow {
            variant,
            seeds: seeds.to_vec(),
            rank1: Vec::new(),
            rank5: Vec::new(),
        };
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let outcome = train(&cfg, &split.train, None)?;
            let result = evaluate_model(&outcome.model, &split.query, &split.gallery, eval)?;
            on_result(variant, seed, result.cmc.rank1);
            row.rank1.push(result.cmc.rank1);
            row.rank5.push(result.cmc.rank5);
        }
        rows.push(row);
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::paper();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(c.lr_at(0), 7e-5));
        assert!(close(c.lr_at(10), 7e-4));
        assert!(close(c.lr_at(39), 7e-4));
        assert!(close(c.lr_at(40), 7e-4 * 0.2));
        assert!(close(c.lr_at(70), 7e-4 * 0.2 * 0.2));
        assert!(c.lr_at(5) > c.lr_at(4));
    }

    #[test]
    fn desk_preset() {
        let d = TrainConfig::desk();
        assert_eq!((d.epochs, d.p, d.k, d.batch_size()), (30, 4, 4, 16));
        assert_eq!(d.decay_epochs, vec![15, 22]);
        assert_eq!(d.backbone.input_size, (64, 32));
        d.validate().unwrap();
        assert_eq!(TrainConfig::paper().batch_size(), 64);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut c = TrainConfig::desk();
        c.decay_epochs = vec![22, 15];
        assert!(c.validate().is_err());
        c.decay_epochs = vec![15, 30];
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::desk();
        let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = TrainConfig::from_toml("epochs = 5\nvariant = \"ftwa_r\"\n").unwrap();
        assert_eq!(partial.epochs, 5);
        assert_eq!(partial.variant, Variant::FtwaR);
        assert!(TrainConfig::from_toml("epochs = \"x\"").is_err());
    }

    #[test]
    fn report_layout() {
        let row = |variant, r1: f64| AblationRow {
            variant,
            seeds: vec![0, 1],
            rank1: vec![r1, r1],
            rank5: vec![1.0, 1.0],
        };
        let report = AblationReport {
            rows: Variant::ALL.iter().map(|&v| row(v, 0.5)).collect(),
        };
        let md = report.to_markdown();
        for v in Variant::ALL {
            assert!(md.contains(&format!("| {} |", v.label())));
        }
        assert!(md.contains("50.0 ± 0.0"));
        assert_eq!(report.to_csv().lines().count(), 9);
    }
}
