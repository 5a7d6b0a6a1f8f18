//! Command-line surface: `prepare-mlr`, `train`, `evaluate`, `ablate` and
//! `gradcheck`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_mlr_split, MlrConfig, MlrSplit, SplitManifest, SplitSource, SyntheticSpec};
use crate::error::{FtwaError, Result};
use crate::eval::{evaluate_model, write_distance_matrix, EvalOptions, EvalReport};
use crate::gradcheck::{run_gradcheck, GradLoss, GradcheckOptions};
use crate::model::{Model, Variant};
use crate::trainer::{run_ablation, train, RunOutput, TrainConfig};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "FTWA_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "ftwa", version, about = "Cross-resolution person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a multi-low-resolution split and write its manifest.
    PrepareMlr(PrepareArgs),
    /// Train one variant and write a run directory.
    Train(TrainArgs),
    /// Score a trained model with single-shot CMC.
    Evaluate(EvaluateArgs),
    /// Train and score every variant and write a comparison table.
    Ablate(AblateArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Generate a procedural corpus instead of reading `--root`.
    #[arg(long, conflicts_with = "root")]
    pub synthetic: bool,
    /// Image directory with `<person>_<camera>_<index>.<ext>` files.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub ids: u32,
    #[arg(long, default_value_t = 2)]
    pub cams: u32,
    /// Images per identity per camera.
    #[arg(long, default_value_t = 4)]
    pub per_cam: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Cameras whose images are degraded.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub lr_cams: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub rates: Vec<u32>,
    /// Network input as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x32", value_parser = parse_size)]
    pub canonical: (u32, u32),
    #[arg(long, default_value_t = 0.5)]
    pub test_fraction: f64,
}

impl Default for CorpusArgs {
    fn default() -> Self {
        Self {
            synthetic: true,
            root: None,
            ids: 20,
            cams: 2,
            per_cam: 4,
            seed: 7,
            lr_cams: vec![1],
            rates: vec![2, 3, 4],
            canonical: (64, 32),
            test_fraction: 0.5,
        }
    }
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("'{v}': {e}"));
    Ok((p(h)?, p(w)?))
}

impl CorpusArgs {
    pub fn source(&self) -> Result<SplitSource> {
        match &self.root {
            Some(root) => Ok(SplitSource::Directory { root: root.clone() }),
            None => {
                let mut spec = SyntheticSpec::new(self.ids, self.cams, self.per_cam, self.seed);
                spec.height = self.canonical.0;
                spec.width = self.canonical.1;
                Ok(SplitSource::Synthetic(spec))
            }
        }
    }

    pub fn mlr_config(&self) -> MlrConfig {
        let mut config = MlrConfig::new(self.lr_cams.iter().copied(), self.seed);
        config.rate_set = self.rates.iter().copied().collect();
        config.canonical_size = self.canonical;
        config.test_fraction = self.test_fraction;
        config
    }

    pub fn build(&self) -> Result<(MlrSplit, SplitManifest)> {
        let source = self.source()?;
        let records = source.load()?;
        if records.is_empty() {
            return Err(FtwaError::Config("the corpus contains no usable images".into()));
        }
        let split = build_mlr_split(&records, &self.mlr_config())?;
        let manifest = split.manifest(source);
        Ok((split, manifest))
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Manifest path.
    #[arg(long, default_value = "mlr_manifest.json")]
    pub out: PathBuf,
    /// Overwrite an existing manifest.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    /// Split manifest from `prepare-mlr`; defaults to the 20-identity
    /// synthetic corpus.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// TOML file overriding preset values; flags override the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Single-threaded kernels for bit-reproducible runs.
    #[arg(long)]
    pub deterministic: bool,
}

impl TrainingArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut config = match self.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| FtwaError::io(path, e))?;
            let overrides: toml::Table =
                toml::from_str(&text).map_err(|e| FtwaError::Config(format!("{}: {e}", path.display())))?;
            let mut base: toml::Table = toml::from_str(&config.to_toml()?)
                .map_err(|e| FtwaError::Config(e.to_string()))?;
            base.extend(overrides);
            config = TrainConfig::from_toml(&toml::to_string(&base).map_err(|e| FtwaError::Config(e.to_string()))?)?;
        }
        if let Some(e) = self.epochs {
            config.epochs = e;
            config.decay_epochs.retain(|&d| d < e);
        }
        config.deterministic |= self.deterministic;
        Ok(config)
    }

    pub fn split(&self) -> Result<(MlrSplit, SplitManifest)> {
        match &self.split {
            Some(path) => {
                let manifest = SplitManifest::read(path)?;
                Ok((manifest.materialize()?, manifest))
            }
            None => CorpusArgs::default().build(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, default_value = "ftwa")]
    pub variant: Variant,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `$FTWA_RUN_ROOT/<config-hash>-<time>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fusion {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long, required_unless_present = "checkpoint")]
    pub run: Option<PathBuf>,
    /// Model file; defaults to `<run>/model.safetensors`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split manifest; defaults to the run's own split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Fusion::On)]
    pub fusion: Fusion,
    /// Write the full query × gallery distance matrix as CSV.
    #[arg(long)]
    pub dump_distances: Option<PathBuf>,
    /// Report path; defaults to stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,ftwa_b,ftwa_r,ftwa")]
    pub variants: Vec<Variant>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Directory for `ablation.md`, `ablation.csv` and `ablation.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Restrict to these losses (repeatable).
    #[arg(long = "loss")]
    pub losses: Vec<GradLoss>,
    /// Shift the checked tensors between the analytic and numeric passes.
    #[arg(long, default_value_t = 0.0)]
    pub perturb: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Record tying a run directory's files to their configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub variant: Variant,
    /// SHA-256 over the program version and the configuration.
    pub content_hash: String,
    pub split: SplitManifest,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub const FILE: &'static str = "run.json";

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| FtwaError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn content_hash(config: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(serde_json::to_vec(config)?);
    Ok(hex::encode(h.finalize()))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(FtwaError::Config(format!(
            "{} already exists and is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| FtwaError::io(dir, e))
}

fn refuse_existing_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(FtwaError::Config(format!(
            "{} already exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn default_run_dir(root: &Path, hash: &str) -> PathBuf {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    root.join(format!("{}-{secs}", &hash[..12]))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FtwaError::io(path, e))
}

/// Outcome of a subcommand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran but its verdict is negative (gradient check failed).
    Failed,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::PrepareMlr(args) => prepare(args),
        Command::Train(args) => train_cmd(args).map(|_| Outcome::Success),
        Command::Evaluate(args) => evaluate(args),
        Command::Ablate(args) => ablate(args),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

fn prepare(args: PrepareArgs) -> Result<Outcome> {
    refuse_existing_file(&args.out, args.force)?;
    let (split, manifest) = args.corpus.build()?;
    manifest.write(&args.out)?;
    println!(
        "wrote {}: {} train, {} query, {} gallery images; {} train and {} test identities; {} excluded",
        args.out.display(),
        split.train.len(),
        split.query.len(),
        split.gallery.len(),
        split.train_identities().len(),
        split.test_identities().len(),
        split.excluded_identities.len()
    );
    Ok(Outcome::Success)
}

/// Trains and returns the run directory.
pub fn train_cmd(args: TrainArgs) -> Result<PathBuf> {
    let mut config = args.training.train_config()?;
    config.variant = args.variant;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let (split, manifest) = args.training.split()?;
    let hash = content_hash(&config)?;
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&args.run_root, &hash));
    claim_dir(&dir, args.force)?;
    write_file(&dir.join("config.toml"), &config.to_toml()?)?;

    let output = RunOutput {
        dir: dir.clone(),
        progress: !args.quiet,
    };
    let outcome = train(&config, &split.train, Some(&output))?;
    let mut artifacts = vec![
        "config.toml".to_string(),
        "model.safetensors".to_string(),
        "metrics.csv".to_string(),
    ];
    if let Some(raft) = outcome.model.raft() {
        raft.export(outcome.model.store(), &dir.join("raft.safetensors"))?;
        artifacts.push("raft.safetensors".into());
    }
    let run = RunManifest {
        seed: config.seed,
        variant: config.variant,
        content_hash: hash,
        split: manifest,
        artifacts,
        config,
    };
    write_file(&dir.join(RunManifest::FILE), &serde_json::to_string_pretty(&run)?)?;
    println!("{}", dir.display());
    Ok(dir)
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| FtwaError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn evaluate(args: EvaluateArgs) -> Result<Outcome> {
    let checkpoint = match (&args.checkpoint, &args.run) {
        (Some(c), _) => c.clone(),
        (None, Some(run)) => run.join("model.safetensors"),
        (None, None) => return Err(FtwaError::Config("pass --run or --checkpoint".into())),
    };
    if let Some(out) = &args.out {
        refuse_existing_file(out, args.force)?;
    }
    let split = match (&args.split, &args.run) {
        (Some(path), _) => SplitManifest::read(path)?.materialize()?,
        (None, Some(run)) => RunManifest::read(run)?.split.materialize()?,
        (None, None) => CorpusArgs::default().build()?.0,
    };
    let (model, _) = Model::load(&checkpoint, DType::F32, &Device::Cpu)?;
    let opts = EvalOptions {
        fusion: args.fusion == Fusion::On,
        trials: args.trials,
        seed: args.seed,
        ..EvalOptions::default()
    };
    let result = evaluate_model(&model, &split.query, &split.gallery, &opts)?;
    if let Some(path) = &args.dump_distances {
        let qid: Vec<u32> = split.query.iter().map(|r| r.person_id).collect();
        let gid: Vec<u32> = split.gallery.iter().map(|r| r.person_id).collect();
        write_distance_matrix(path, &result.distances, &qid, &gid)?;
    }
    let report = EvalReport {
        rank1: result.cmc.rank1,
        rank5: result.cmc.rank5,
        rank10: result.cmc.rank10,
        rank20: result.cmc.rank20,
        trials: result.cmc.trials,
        seed: args.seed,
        variant: model.variant().key().to_string(),
        checkpoint_hash: file_hash(&checkpoint)?,
        fusion: opts.fusion,
        queries: split.query.len(),
        gallery: split.gallery.len(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    println!("{json}");
    Ok(Outcome::Success)
}

fn ablate(args: AblateArgs) -> Result<Outcome> {
    let config = args.training.train_config()?;
    config.validate()?;
    let variants: Vec<Variant> = {
        let set: BTreeSet<Variant> = args.variants.iter().copied().collect();
        set.into_iter().collect()
    };
    let (split, _) = args.training.split()?;
    let hash = content_hash(&config)?;
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&args.run_root, &hash));
    claim_dir(&dir, args.force)?;
    let eval = EvalOptions {
        trials: args.trials,
        ..EvalOptions::default()
    };
    let report = run_ablation(&config, &variants, &args.seeds, &split, &eval, |v, seed, r1| {
        eprintln!("{:<8} seed {seed}: rank-1 {:.1}%", v.label(), 100.0 * r1);
    })?;
    write_file(&dir.join("ablation.md"), &report.to_markdown())?;
    write_file(&dir.join("ablation.csv"), &report.to_csv())?;
    write_file(&dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_markdown());
    Ok(Outcome::Success)
}

fn gradcheck(args: GradcheckArgs) -> Result<Outcome> {
    let opts = GradcheckOptions {
        losses: if args.losses.is_empty() {
            GradLoss::ALL.to_vec()
        } else {
            args.losses
        },
        perturb: args.perturb,
        seed: args.seed,
        ..GradcheckOptions::default()
    };
    let results = run_gradcheck(&opts)?;
    for r in &results {
        println!(
            "{:<8} {} max relative error {:.3e} over {} coordinates (worst {})",
            r.loss.key(),
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.coordinates,
            r.worst
        );
    }
    Ok(if results.iter().all(|r| r.passed) {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x32"), Ok((64, 32)));
        assert!(parse_size("64").is_err());
    }

    #[test]
    fn claim_dir_refuses_non_empty() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        claim_dir(&run, false).unwrap();
        claim_dir(&run, false).unwrap();
        std::fs::write(run.join("x"), "1").unwrap();
        assert!(claim_dir(&run, false).is_err());
        claim_dir(&run, true).unwrap();
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["ftwa", "gradcheck", "--loss", "swa_tri", "--perturb", "0.1"]).unwrap();
        match cli.command {
            Command::Gradcheck(a) => {
                assert_eq!(a.losses, vec![GradLoss::SwaTri]);
                assert_eq!(a.perturb, 0.1);
            }
            _ => panic!(),
        }
        let cli = Cli::try_parse_from(["ftwa", "train", "--variant", "baseline", "--deterministic"]).unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!(a.variant, Variant::Baseline);
                assert!(a.training.train_config().unwrap().deterministic);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 12\nbase_lr = 0.001\n").unwrap();
        let args = TrainingArgs {
            split: None,
            preset: Preset::Desk,
            config: Some(path),
            epochs: Some(10),
            deterministic: false,
        };
        let c = args.train_config().unwrap();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.base_lr, 0.001);
        assert_eq!(c.p, 4);
    }
}
