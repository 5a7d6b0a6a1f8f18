use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{downsample, upsample_to_canonical, ImageRecord};
use crate::error::{FtwaError, Result};

/// `P` identities × `K` instances, every image already at canonical size.
///
/// Each identity contributes roughly half high-resolution and half
/// low-resolution instances when its pool allows it. Every high-resolution
/// instance comes with one synthetic low-resolution view in `synth_lr`
/// (same index), degraded at a rate drawn from the sampler's rate set.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub hr_images: Vec<ImageRecord>,
    pub hr_labels: Vec<usize>,
    pub synth_lr: Vec<ImageRecord>,
    pub lr_images: Vec<ImageRecord>,
    pub lr_labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.hr_images.len() + self.lr_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
struct Pool {
    hr: Vec<usize>,
    lr: Vec<usize>,
}

impl Pool {
    fn len(&self) -> usize {
        self.hr.len() + self.lr.len()
    }
}

/// Endless, seeded stream of identity-balanced batches.
pub struct PkSampler {
    records: Vec<ImageRecord>,
    pools: BTreeMap<u32, Pool>,
    eligible: Vec<u32>,
    labels: BTreeMap<u32, usize>,
    rates: Vec<u32>,
    canonical: (u32, u32),
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(
        train: &[ImageRecord],
        p: usize,
        k: usize,
        rates: &[u32],
        canonical: (u32, u32),
        seed: u64,
    ) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(FtwaError::Config(format!(
                "P×K sampling needs P >= 2 and K >= 2, got P={p} K={k}"
            )));
        }
        if rates.is_empty() || rates.iter().any(|&r| r < 2) {
            return Err(FtwaError::Config(format!("invalid rate set {rates:?}")));
        }
        let mut pools: BTreeMap<u32, Pool> = BTreeMap::new();
        for (i, r) in train.iter().enumerate() {
            let pool = pools.entry(r.person_id).or_default();
            if r.tag.is_low_resolution() {
                pool.lr.push(i);
            } else {
                pool.hr.push(i);
            }
        }
        let labels = pools.keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let eligible: Vec<u32> = pools
            .iter()
            .filter(|(_, pool)| pool.len() >= k)
            .map(|(&id, _)| id)
            .collect();
        if eligible.len() < p {
            return Err(FtwaError::Config(format!(
                "need {p} identities with at least {k} images, only {} qualify",
                eligible.len()
            )));
        }
        Ok(Self {
            records: train.to_vec(),
            pools,
            eligible,
            labels,
            rates: rates.to_vec(),
            canonical,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Dense class index of every training identity.
    pub fn labels(&self) -> &BTreeMap<u32, usize> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Batches that make up one pass over the training images.
    pub fn batches_per_epoch(&self) -> usize {
        (self.records.len() / (self.p * self.k)).max(1)
    }

    pub fn next_batch(&mut self) -> Result<TrainingBatch> {
        let mut ids = self.eligible.clone();
        ids.shuffle(&mut self.rng);
        ids.truncate(self.p);
        ids.sort_unstable();

        let mut batch = TrainingBatch {
            hr_images: Vec::new(),
            hr_labels: Vec::new(),
            synth_lr: Vec::new(),
            lr_images: Vec::new(),
            lr_labels: Vec::new(),
            p: self.p,
            k: self.k,
        };
        for id in ids {
            let pool = &self.pools[&id];
            let want_lr = (self.k / 2).min(pool.lr.len());
            let want_hr = (self.k - want_lr).min(pool.hr.len());
            let want_lr = self.k - want_hr;
            let mut hr = pool.hr.clone();
            let mut lr = pool.lr.clone();
            hr.shuffle(&mut self.rng);
            lr.shuffle(&mut self.rng);
            let label = self.labels[&id];
            for &i in &hr[..want_hr] {
                let rec = upsample_to_canonical(&self.records[i], self.canonical)?;
                let rate = self.rates[self.rng.random_range(0..self.rates.len())];
                let view = upsample_to_canonical(&downsample(&self.records[i], rate)?, self.canonical)?;
                batch.hr_images.push(rec);
                batch.synth_lr.push(view);
                batch.hr_labels.push(label);
            }
            for &i in &lr[..want_lr] {
                batch
                    .lr_images
                    .push(upsample_to_canonical(&self.records[i], self.canonical)?);
                batch.lr_labels.push(label);
            }
        }
        Ok(batch)
    }
}

impl Iterator for PkSampler {
    type Item = Result<TrainingBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Identity-balanced sampler over `train` with `P` identities and `K`
/// instances per identity.
pub fn pk_sample(
    train: &[ImageRecord],
    p: usize,
    k: usize,
    rates: &[u32],
    canonical: (u32, u32),
    seed: u64,
) -> Result<PkSampler> {
    PkSampler::new(train, p, k, rates, canonical, seed)
}
