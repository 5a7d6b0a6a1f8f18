//! Descriptors, the weighted cross-resolution distance and single-shot CMC.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{downsample, upsample_to_canonical, ImageRecord};
use crate::error::{FtwaError, Result};
use crate::model::{Embedding, Model};

/// Ranks reported by [`CmcResult`].
pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    High,
    Low,
}

/// Matching unit: unit-length native and counterpart vectors and their
/// normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub primary: Vec<f64>,
    pub auxiliary: Option<Vec<f64>>,
    /// `(w_native, w_counterpart)`, positive and summing to 1; `(1, 0)`
    /// when there is no auxiliary vector.
    pub weights: (f64, f64),
    pub native: Resolution,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Descriptor {
    /// Normalizes both vectors to unit length and the weights to sum 1.
    /// Raw weights are ignored without an auxiliary vector.
    pub fn new(
        primary: Vec<f64>,
        auxiliary: Option<Vec<f64>>,
        weights: (f64, f64),
        native: Resolution,
    ) -> Result<Self> {
        if primary.is_empty() {
            return Err(FtwaError::DegenerateInput("empty descriptor vector".into()));
        }
        let weights = match &auxiliary {
            None => (1.0, 0.0),
            Some(aux) => {
                if aux.len() != primary.len() {
                    return Err(FtwaError::shape(
                        "descriptor",
                        format!("auxiliary of length {}", primary.len()),
                        aux.len(),
                    ));
                }
                let (a, b) = weights;
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return Err(FtwaError::Contract(format!(
                        "descriptor weights must be positive, got ({a}, {b})"
                    )));
                }
                (a / (a + b), b / (a + b))
            }
        };
        Ok(Self {
            primary: unit(primary),
            auxiliary: auxiliary.map(unit),
            weights,
            native,
        })
    }

    /// Drops the auxiliary path.
    pub fn without_auxiliary(&self) -> Self {
        Self {
            primary: self.primary.clone(),
            auxiliary: None,
            weights: (1.0, 0.0),
            native: self.native,
        }
    }

    pub fn dim(&self) -> usize {
        self.primary.len()
    }
}

/// Weighted descriptor distance.
///
/// Terms compare vectors living in the same resolution space. When both
/// sides share a native resolution this is
/// `√(wq1·wg1)·‖pq−pg‖ + √(wq2·wg2)·‖aq−ag‖`; across resolutions the
/// native vector of one side meets the counterpart vector of the other.
/// A missing auxiliary contributes nothing, which reduces the distance to
/// plain Euclidean matching of the primary vectors.
pub fn distance(q: &Descriptor, g: &Descriptor) -> Result<f64> {
    if q.dim() != g.dim() {
        return Err(FtwaError::shape("descriptor distance", q.dim(), g.dim()));
    }
    let (qa, ga) = match (&q.auxiliary, &g.auxiliary) {
        (Some(qa), Some(ga)) => (qa, ga),
        _ => return Ok((q.weights.0 * g.weights.0).sqrt() * euclidean(&q.primary, &g.primary)),
    };
    let (q1, q2) = q.weights;
    let (g1, g2) = g.weights;
    Ok(if q.native == g.native {
        (q1 * g1).sqrt() * euclidean(&q.primary, &g.primary) + (q2 * g2).sqrt() * euclidean(qa, ga)
    } else {
        (q1 * g2).sqrt() * euclidean(&q.primary, ga) + (q2 * g1).sqrt() * euclidean(qa, &g.primary)
    })
}

pub fn distance_matrix(queries: &[Descriptor], gallery: &[Descriptor]) -> Result<Vec<Vec<f64>>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|g| distance(q, g)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub trials: usize,
    /// Accuracy at each of [`CMC_RANKS`] for every trial.
    pub per_trial: Vec<[f64; 4]>,
}

impl CmcResult {
    pub fn ranks(&self) -> [f64; 4] {
        [self.rank1, self.rank5, self.rank10, self.rank20]
    }
}

/// Single-shot CMC over a precomputed `queries × gallery` distance matrix.
///
/// Each trial draws one gallery entry per identity. A query's rank is one
/// plus the number of other sampled entries at a distance no larger than
/// the true match, so ties count against the query.
pub fn cmc_from_distances(
    distances: &[Vec<f64>],
    query_ids: &[u32],
    gallery_ids: &[u32],
    trials: usize,
    seed: u64,
) -> Result<CmcResult> {
    if distances.len() != query_ids.len() || distances.iter().any(|r| r.len() != gallery_ids.len()) {
        return Err(FtwaError::shape(
            "distance matrix",
            format!("{} × {}", query_ids.len(), gallery_ids.len()),
            format!("{} rows", distances.len()),
        ));
    }
    if trials == 0 || query_ids.is_empty() {
        return Err(FtwaError::Protocol("need at least one trial and one query".into()));
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in gallery_ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let missing: BTreeSet<u32> = query_ids.iter().filter(|id| !by_id.contains_key(id)).copied().collect();
    if !missing.is_empty() {
        return Err(FtwaError::Protocol(format!(
            "query identities absent from the gallery: {missing:?}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_trial = Vec::with_capacity(trials);
    for _ in 0..trials {
        let chosen: BTreeMap<u32, usize> = by_id
            .iter()
            .map(|(&id, idx)| (id, idx[rng.random_range(0..idx.len())]))
            .collect();
        let mut hits = [0usize; 4];
        for (row, &qid) in distances.iter().zip(query_ids) {
            let d_true = row[chosen[&qid]];
            let rank = 1 + chosen
                .iter()
                .filter(|(&id, &g)| id != qid && row[g] <= d_true)
                .count();
            for (h, &k) in hits.iter_mut().zip(&CMC_RANKS) {
                *h += (rank <= k) as usize;
            }
        }
        let n = query_ids.len() as f64;
        per_trial.push(hits.map(|h| h as f64 / n));
    }
    let mean = |i: usize| per_trial.iter().map(|t| t[i]).sum::<f64>() / trials as f64;
    Ok(CmcResult {
        rank1: mean(0),
        rank5: mean(1),
        rank10: mean(2),
        rank20: mean(3),
        trials,
        per_trial,
    })
}

pub fn cmc(
    queries: &[Descriptor],
    query_ids: &[u32],
    gallery: &[Descriptor],
    gallery_ids: &[u32],
    trials: usize,
    seed: u64,
) -> Result<CmcResult> {
    if queries.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(FtwaError::shape(
            "cmc labels",
            format!("{} queries, {} gallery", queries.len(), gallery.len()),
            format!("{} and {} labels", query_ids.len(), gallery_ids.len()),
        ));
    }
    cmc_from_distances(&distance_matrix(queries, gallery)?, query_ids, gallery_ids, trials, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Use the auxiliary path when the model provides one.
    pub fusion: bool,
    /// Degradation rate of the gallery's low-resolution views.
    pub gallery_view_rate: u32,
    pub trials: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fusion: true,
            gallery_view_rate: 2,
            trials: 10,
            seed: 0,
            batch_size: 64,
        }
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn weights(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn to_descriptors(e: &Embedding, native: Resolution, fusion: bool) -> Result<Vec<Descriptor>> {
    let primary = rows(&e.primary)?;
    let aux = match (&e.auxiliary, fusion) {
        (Some(a), true) => Some(rows(a)?),
        _ => None,
    };
    let w = match &e.weights {
        Some((a, b)) => Some((weights(a)?, weights(b)?)),
        None => None,
    };
    primary
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let a = aux.as_ref().map(|a| a[i].clone());
            let ws = w.as_ref().map_or((0.5, 0.5), |(a, b)| (a[i], b[i]));
            Descriptor::new(p, a, ws, native)
        })
        .collect()
}

/// Descriptors of low-resolution query images.
pub fn query_descriptors(
    model: &Model,
    queries: &[ImageRecord],
    opts: &EvalOptions,
) -> Result<Vec<Descriptor>> {
    let canonical = model.config().backbone.input_size;
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(opts.batch_size.max(1)) {
        let up = chunk
            .iter()
            .map(|r| upsample_to_canonical(r, canonical))
            .collect::<Result<Vec<_>>>()?;
        let xs = model.to_tensor(&up.iter().collect::<Vec<_>>())?;
        out.extend(to_descriptors(&model.embed_queries(&xs)?, Resolution::Low, opts.fusion)?);
    }
    Ok(out)
}

/// Descriptors of high-resolution gallery images, each paired with a view
/// degraded at `opts.gallery_view_rate`.
pub fn gallery_descriptors(
    model: &Model,
    gallery: &[ImageRecord],
    opts: &EvalOptions,
) -> Result<Vec<Descriptor>> {
    let canonical = model.config().backbone.input_size;
    let mut out = Vec::with_capacity(gallery.len());
    for chunk in gallery.chunks(opts.batch_size.max(1)) {
        let hr = chunk
            .iter()
            .map(|r| upsample_to_canonical(r, canonical))
            .collect::<Result<Vec<_>>>()?;
        let views = chunk
            .iter()
            .map(|r| upsample_to_canonical(&downsample(r, opts.gallery_view_rate)?, canonical))
            .collect::<Result<Vec<_>>>()?;
        let xs = model.to_tensor(&hr.iter().collect::<Vec<_>>())?;
        let vs = model.to_tensor(&views.iter().collect::<Vec<_>>())?;
        out.extend(to_descriptors(&model.embed_gallery(&xs, &vs)?, Resolution::High, opts.fusion)?);
    }
    Ok(out)
}

/// Summary written by the `evaluate` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub trials: usize,
    pub seed: u64,
    pub variant: String,
    pub checkpoint_hash: String,
    pub fusion: bool,
    pub queries: usize,
    pub gallery: usize,
}

/// Everything needed to score a model on a query/gallery split.
pub struct Evaluation {
    pub cmc: CmcResult,
    pub distances: Vec<Vec<f64>>,
}

pub fn evaluate_model(
    model: &Model,
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let q = query_descriptors(model, queries, opts)?;
    let g = gallery_descriptors(model, gallery, opts)?;
    let qid: Vec<u32> = queries.iter().map(|r| r.person_id).collect();
    let gid: Vec<u32> = gallery.iter().map(|r| r.person_id).collect();
    let distances = distance_matrix(&q, &g)?;
    let cmc = cmc_from_distances(&distances, &qid, &gid, opts.trials, opts.seed)?;
    Ok(Evaluation { cmc, distances })
}

/// Writes a distance matrix as CSV with identity headers.
pub fn write_distance_matrix(
    path: &Path,
    distances: &[Vec<f64>],
    query_ids: &[u32],
    gallery_ids: &[u32],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["query_id".to_string()];
    header.extend(gallery_ids.iter().map(|g| g.to_string()));
    w.write_record(&header)?;
    for (row, q) in distances.iter().zip(query_ids) {
        let mut rec = vec![q.to_string()];
        rec.extend(row.iter().map(|d| format!("{d:.6}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FtwaError::io(path, e))?;
    Ok(())
}
