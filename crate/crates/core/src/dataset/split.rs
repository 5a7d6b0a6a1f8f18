use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{downsample, ingest_directory, ImageRecord, ResolutionTag, SyntheticSpec};
use crate::error::{FtwaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrConfig {
    pub rate_set: BTreeSet<u32>,
    /// Cameras whose images are degraded.
    pub lr_camera_ids: BTreeSet<u32>,
    /// `(height, width)` of the network input.
    pub canonical_size: (u32, u32),
    pub rng_seed: u64,
    /// Share of identities held out for testing when no explicit partition
    /// is given.
    pub test_fraction: f64,
    /// Explicit test identities; overrides `test_fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_identities: Option<BTreeSet<u32>>,
}

impl MlrConfig {
    pub fn new(lr_camera_ids: impl IntoIterator<Item = u32>, rng_seed: u64) -> Self {
        Self {
            rate_set: super::DEFAULT_RATES.into_iter().collect(),
            lr_camera_ids: lr_camera_ids.into_iter().collect(),
            canonical_size: (64, 32),
            rng_seed,
            test_fraction: 0.5,
            test_identities: None,
        }
    }

    pub fn validate(&self, cameras: &BTreeSet<u32>) -> Result<()> {
        if self.rate_set.is_empty() || self.rate_set.iter().any(|&r| r < 2) {
            return Err(FtwaError::Config(format!(
                "rate set must be non-empty with every rate >= 2, got {:?}",
                self.rate_set
            )));
        }
        if self.lr_camera_ids.is_empty() {
            return Err(FtwaError::Config("no low-resolution camera given".into()));
        }
        if !self.lr_camera_ids.is_subset(cameras) {
            return Err(FtwaError::Config(format!(
                "low-resolution cameras {:?} not all present in {:?}",
                self.lr_camera_ids, cameras
            )));
        }
        if self.lr_camera_ids.len() == cameras.len() {
            return Err(FtwaError::Config(
                "every camera is marked low resolution; the gallery would be empty".into(),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(FtwaError::Config(format!(
                "test fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        let (h, w) = self.canonical_size;
        if h == 0 || w == 0 {
            return Err(FtwaError::Config("canonical size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Query,
    Gallery,
}

/// Train / query / gallery partition of an MLR dataset.
#[derive(Debug, Clone)]
pub struct MlrSplit {
    pub train: Vec<ImageRecord>,
    /// Degraded test images.
    pub query: Vec<ImageRecord>,
    /// Untouched high-resolution test images.
    pub gallery: Vec<ImageRecord>,
    /// Test identities dropped because they were seen by only one side of
    /// the low/high-resolution camera divide.
    pub excluded_identities: Vec<u32>,
    pub config: MlrConfig,
    origin: BTreeMap<SplitRole, Vec<usize>>,
}

impl MlrSplit {
    pub fn train_identities(&self) -> BTreeSet<u32> {
        self.train.iter().map(|r| r.person_id).collect()
    }

    pub fn test_identities(&self) -> BTreeSet<u32> {
        self.query.iter().map(|r| r.person_id).collect()
    }

    pub fn manifest(&self, source: SplitSource) -> SplitManifest {
        let mut entries = Vec::new();
        for (role, records) in [
            (SplitRole::Train, &self.train),
            (SplitRole::Query, &self.query),
            (SplitRole::Gallery, &self.gallery),
        ] {
            let origin = &self.origin[&role];
            for (rec, &idx) in records.iter().zip(origin) {
                entries.push(ManifestEntry {
                    split: role,
                    source_index: idx,
                    path: rec.source_path.as_ref().map(|p| p.display().to_string()),
                    person_id: rec.person_id,
                    camera_id: rec.camera_id,
                    tag: rec.tag,
                });
            }
        }
        SplitManifest {
            source,
            config: self.config.clone(),
            excluded_identities: self.excluded_identities.clone(),
            entries,
        }
    }
}

/// Where the records of a split come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitSource {
    Synthetic(SyntheticSpec),
    Directory { root: PathBuf },
}

impl SplitSource {
    pub fn load(&self) -> Result<Vec<ImageRecord>> {
        match self {
            SplitSource::Synthetic(spec) => spec.generate(),
            SplitSource::Directory { root } => {
                let report = ingest_directory(root)?;
                for (path, reason) in &report.rejected {
                    log::warn!("skipping {}: {reason}", path.display());
                }
                Ok(report.records)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: SplitRole,
    pub source_index: usize,
    pub path: Option<String>,
    pub person_id: u32,
    pub camera_id: u32,
    #[serde(flatten)]
    pub tag: ResolutionTag,
}

/// Frozen split: enough to rebuild the exact same records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source: SplitSource,
    pub config: MlrConfig,
    pub excluded_identities: Vec<u32>,
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| FtwaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FtwaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn identities(&self, role: SplitRole) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.split == role)
            .map(|e| e.person_id)
            .collect()
    }

    /// Reloads the source and replays the recorded degradations.
    pub fn materialize(&self) -> Result<MlrSplit> {
        let records = self.source.load()?;
        let mut split = MlrSplit {
            train: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
            excluded_identities: self.excluded_identities.clone(),
            config: self.config.clone(),
            origin: BTreeMap::new(),
        };
        for entry in &self.entries {
            let src = records.get(entry.source_index).ok_or_else(|| {
                FtwaError::Config(format!(
                    "manifest refers to record {} but the source has {}",
                    entry.source_index,
                    records.len()
                ))
            })?;
            if (src.person_id, src.camera_id) != (entry.person_id, entry.camera_id) {
                return Err(FtwaError::Config(format!(
                    "manifest entry {} expects identity {} camera {}, source has {} / {}",
                    entry.source_index,
                    entry.person_id,
                    entry.camera_id,
                    src.person_id,
                    src.camera_id
                )));
            }
            let rec = match entry.tag {
                ResolutionTag::SynthLr { rate } => downsample(src, rate)?,
                _ => src.clone(),
            };
            let bucket = match entry.split {
                SplitRole::Train => &mut split.train,
                SplitRole::Query => &mut split.query,
                SplitRole::Gallery => &mut split.gallery,
            };
            bucket.push(rec);
            split
                .origin
                .entry(entry.split)
                .or_default()
                .push(entry.source_index);
        }
        for role in [SplitRole::Train, SplitRole::Query, SplitRole::Gallery] {
            split.origin.entry(role).or_default();
        }
        Ok(split)
    }
}

/// Builds the multi-low-resolution protocol: identities are partitioned
/// into train and test, every image from a low-resolution camera is
/// degraded by a rate drawn uniformly from `rate_set`, test images from
/// those cameras form the query set and the remaining test images the
/// gallery.
pub fn build_mlr_split(records: &[ImageRecord], config: &MlrConfig) -> Result<MlrSplit> {
    let cameras: BTreeSet<u32> = records.iter().map(|r| r.camera_id).collect();
    if cameras.len() < 2 {
        return Err(FtwaError::Config(format!(
            "MLR protocol needs at least two cameras, found {:?}",
            cameras
        )));
    }
    config.validate(&cameras)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let identities: BTreeSet<u32> = records.iter().map(|r| r.person_id).collect();
    let test_ids: BTreeSet<u32> = match &config.test_identities {
        Some(ids) => {
            if let Some(missing) = ids.iter().find(|id| !identities.contains(id)) {
                return Err(FtwaError::Config(format!(
                    "test identity {missing} has no images"
                )));
            }
            ids.clone()
        }
        None => {
            if identities.len() < 2 {
                return Err(FtwaError::Config(
                    "need at least two identities to form train and test".into(),
                ));
            }
            let mut ids: Vec<u32> = identities.iter().copied().collect();
            ids.shuffle(&mut rng);
            let n_test = ((ids.len() as f64 * config.test_fraction).round() as usize)
                .clamp(1, ids.len() - 1);
            ids[..n_test].iter().copied().collect()
        }
    };

    let is_lr = |r: &ImageRecord| config.lr_camera_ids.contains(&r.camera_id);
    let mut excluded = Vec::new();
    for id in &test_ids {
        let (mut lr, mut hr) = (false, false);
        for r in records.iter().filter(|r| r.person_id == *id) {
            if is_lr(r) {
                lr = true;
            } else {
                hr = true;
            }
        }
        if !(lr && hr) {
            excluded.push(*id);
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} test identities appear on one side of the camera divide only and are excluded",
            excluded.len()
        );
    }

    let rates: Vec<u32> = config.rate_set.iter().copied().collect();
    let mut split = MlrSplit {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        excluded_identities: excluded.clone(),
        config: config.clone(),
        origin: BTreeMap::new(),
    };
    for role in [SplitRole::Train, SplitRole::Query, SplitRole::Gallery] {
        split.origin.insert(role, Vec::new());
    }
    for (idx, rec) in records.iter().enumerate() {
        let in_test = test_ids.contains(&rec.person_id);
        if in_test && excluded.contains(&rec.person_id) {
            continue;
        }
        let rec = if is_lr(rec) {
            let rate = rates[rng.random_range(0..rates.len())];
            downsample(rec, rate)?
        } else {
            rec.clone()
        };
        let role = match (in_test, rec.tag.is_low_resolution()) {
            (false, _) => SplitRole::Train,
            (true, true) => SplitRole::Query,
            (true, false) => SplitRole::Gallery,
        };
        let bucket = match role {
            SplitRole::Train => &mut split.train,
            SplitRole::Query => &mut split.query,
            SplitRole::Gallery => &mut split.gallery,
        };
        bucket.push(rec);
        split.origin.get_mut(&role).expect("role present").push(idx);
    }
    Ok(split)
}
